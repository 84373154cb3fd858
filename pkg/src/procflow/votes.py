"""Vote responses and the deterministic combination of votes into a verdict.

Subscribed services answer votable events with one of ack / callback / skip /
stop / start / value.  `combine_votes` folds a list of final responses (no
callbacks left) into a single Verdict:

- ack is neutral and never changes the outcome.
- value responses agreeing per target+name are applied; any per-name
  disagreement discards all value actions and stops the instance instead.
- skip, start and stop survive combination; a simultaneous start and stop is
  dissent: both are dropped and the verdict is marked blocked (the current
  state remains).
- Action order in the verdict is fixed: set_values, then start_instance, then
  skip_activity, then stop_instance.
- With no responses (or only acks) the verdict is a bare proceed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Optional

VOTE_KINDS = ("ack", "callback", "skip", "stop", "start", "value")

# (topic, event) pairs on which subscriptions may set the vote flag.
# state start/stop, context/description changes, and condition evaluations
# come from the data stream contract; the activity syncing states are votes
# by definition of the activity lifecycle.
VOTABLE_PAIRS = frozenset({
    ("state", "start"),
    ("state", "stop"),
    ("dataelements", "change"),
    ("endpoints", "change"),
    ("attributes", "change"),
    ("condition", "evaluation"),
    ("description", "change"),
    ("activity", "syncing_before"),
    ("activity", "syncing_after"),
})


@dataclass(frozen=True)
class VoteResponse:
    kind: str
    # value responses carry what to set: target in
    # {condition, dataelement, endpoint, attribute}, a name (except for
    # condition), and the value itself.
    target: Optional[str] = None
    name: Optional[str] = None
    value: Any = None

    def __post_init__(self) -> None:
        if self.kind not in VOTE_KINDS:
            raise ValueError(f"unknown vote response kind {self.kind!r}")
        if self.kind == "value" and self.target is None:
            raise ValueError("value response requires a target")

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"response": self.kind}
        if self.kind == "value":
            out["target"] = self.target
            if self.name is not None:
                out["name"] = self.name
            out["value"] = self.value
        return out

    @classmethod
    def from_dict(cls, raw: dict[str, Any]) -> "VoteResponse":
        kind = raw.get("response", "ack")
        if kind == "value":
            return cls(kind="value", target=raw.get("target", "dataelement"),
                       name=raw.get("name"), value=raw.get("value"))
        return cls(kind=kind)


ACK = VoteResponse("ack")


@dataclass(frozen=True)
class Verdict:
    """Ordered actions plus a blocked flag for start/stop dissent."""
    actions: tuple[tuple, ...] = ()   # ("set_values", ((target,name,value),...)),
                                      # ("start_instance",), ("skip_activity",),
                                      # ("stop_instance",), ("proceed",)
    blocked: bool = False

    @property
    def action_names(self) -> tuple[str, ...]:
        return tuple(a[0] for a in self.actions)

    def has(self, name: str) -> bool:
        return name in self.action_names

    @property
    def set_values(self) -> tuple[tuple, ...]:
        for a in self.actions:
            if a[0] == "set_values":
                return a[1]
        return ()


def combine_votes(responses: list[VoteResponse], context: str = "activity") -> Verdict:
    """Fold final vote responses into a deterministic, order-insensitive verdict.

    `context` names the votable kind (activity, state, condition,
    dataelements, endpoints, attributes, description); it only scopes how
    value responses are interpreted downstream, the combination rules are
    uniform.
    """
    if any(r.kind == "callback" for r in responses):
        raise ValueError("combine_votes requires final responses; resolve "
                         "callbacks first")
    effective = [r for r in responses if r.kind != "ack"]

    groups: dict[tuple, list[Any]] = {}
    for r in effective:
        if r.kind == "value":
            groups.setdefault((r.target, r.name), []).append(r.value)
    conflict = any(_distinct(vals) > 1 for vals in groups.values())

    has_skip = any(r.kind == "skip" for r in effective)
    has_start = any(r.kind == "start" for r in effective)
    has_stop = any(r.kind == "stop" for r in effective) or conflict
    blocked = has_start and has_stop
    if blocked:
        # dissenting start/stop cannot be combined; the current state remains
        has_start = has_stop = False

    actions: list[tuple] = []
    if groups and not conflict:
        values = tuple(sorted(((t, n, _freeze(groups[(t, n)][0]))
                               for (t, n) in groups),
                              key=lambda item: (str(item[0]), str(item[1]))))
        actions.append(("set_values", values))
    if has_start:
        actions.append(("start_instance",))
    if has_skip:
        actions.append(("skip_activity",))
    if has_stop:
        actions.append(("stop_instance",))
    if not actions and not blocked:
        actions.append(("proceed",))
    return Verdict(actions=tuple(actions), blocked=blocked)


def _freeze(value: Any) -> Any:
    return value


def _distinct(values: list[Any]) -> int:
    seen: list[Any] = []
    for v in values:
        if not any(v == s for s in seen):
            seen.append(v)
    return len(seen)
