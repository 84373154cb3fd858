"""Data stream gateway: topic subscriptions, push and SSE delivery, votes.

Normal events are fire and forget: `deliver` only enqueues, per-subscription
worker threads do the pushing.  Votes block the affected enactment or
transition (never the gateway): every vote-subscribed service is asked and
the responses are combined into one verdict.
"""

from __future__ import annotations

import secrets
import threading
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .bus import Bus, BusMessage
from .votes import (VOTABLE_PAIRS, Verdict, VoteResponse, combine_votes)

TOPICS = ("state", "activity", "position", "status", "dataelements",
          "description", "endpoints", "attributes", "condition", "task")


class SubscriptionError(Exception):
    pass


@dataclass
class Selection:
    topic: str
    event: str          # exact name or "*"
    is_vote: bool = False

    def matches(self, topic: str, event: str) -> bool:
        return self.topic == topic and self.event in ("*", event)


class _BoundedQueue:
    """FIFO with drop-oldest overflow; reports how many were dropped."""

    def __init__(self, bound: int):
        self._items: deque = deque()
        self._bound = bound
        self._cv = threading.Condition()

    def put(self, item: Any) -> int:
        with self._cv:
            dropped = 0
            while len(self._items) >= self._bound:
                self._items.popleft()
                dropped += 1
            self._items.append(item)
            self._cv.notify()
            return dropped

    def get(self, timeout: Optional[float] = None) -> Optional[Any]:
        with self._cv:
            if not self._items:
                self._cv.wait(timeout)
            if not self._items:
                return None
            return self._items.popleft()


PushTarget = Callable[[dict[str, Any]], Optional[dict[str, Any]]]


@dataclass
class Subscription:
    id: str
    selections: list[Selection]
    push_endpoint: Optional[str] = None      # URL; None means SSE delivery
    local_handler: Optional[PushTarget] = None  # embedded in-process subscriber
    queue: _BoundedQueue = field(default_factory=lambda: _BoundedQueue(10_000))

    @property
    def mode(self) -> str:
        if self.local_handler is not None:
            return "local"
        return "push" if self.push_endpoint else "sse"

    def wants_event(self, topic: str, event: str) -> bool:
        return any(s.matches(topic, event) and not s.is_vote
                   for s in self.selections)

    def wants_vote(self, topic: str, event: str) -> bool:
        return any(s.matches(topic, event) and s.is_vote
                   for s in self.selections)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "endpoint": self.push_endpoint,
            "mode": self.mode,
            "selections": [{"topic": s.topic, "event": s.event,
                            "vote": s.is_vote} for s in self.selections],
        }


def _parse_selections(raw: Any) -> list[Selection]:
    if not isinstance(raw, list) or not raw:
        raise SubscriptionError("selections must be a non-empty list")
    out = []
    for item in raw:
        topic = item.get("topic")
        event = item.get("event", "*")
        is_vote = bool(item.get("vote", False))
        if topic not in TOPICS:
            raise SubscriptionError(f"invalid topic {topic!r}")
        if is_vote:
            votable = (topic, event) in VOTABLE_PAIRS or \
                (event == "*" and any(t == topic for t, _ in VOTABLE_PAIRS))
            if not votable:
                raise SubscriptionError(
                    f"({topic}, {event}) is not votable")
        out.append(Selection(topic=topic, event=event, is_vote=is_vote))
    return out


class DatastreamGateway:
    """Implements both the external subscription surface and the engine's
    vote-collection hook (`collect_verdict`)."""

    def __init__(self, bus: Bus, base_url: str = "",
                 vote_timeout: float = 10.0,
                 vote_callback_ceiling: float = 60.0,
                 push_timeout: float = 5.0, push_retries: int = 3,
                 queue_bound: int = 10_000):
        self.bus = bus
        self.base_url = base_url.rstrip("/")
        self.vote_timeout = vote_timeout
        self.vote_callback_ceiling = vote_callback_ceiling
        self.push_timeout = push_timeout
        self.push_retries = push_retries
        self.queue_bound = queue_bound
        self._lock = threading.RLock()
        self._subs: dict[str, Subscription] = {}
        self._workers: dict[str, threading.Thread] = {}
        self._closed = False
        # pending vote answers keyed by vote callback id
        self._pending_votes: dict[str, tuple[threading.Event, list]] = {}
        bus.subscribe(self._on_bus_message,
                      matcher=lambda m: m.kind == "event")

    # -- subscriptions -------------------------------------------------------

    def subscribe(self, spec: dict[str, Any],
                  local_handler: Optional[PushTarget] = None) -> Subscription:
        selections = _parse_selections(spec.get("selections"))
        sub = Subscription(
            id=secrets.token_urlsafe(9),
            selections=selections,
            push_endpoint=spec.get("endpoint"),
            local_handler=local_handler,
            queue=_BoundedQueue(self.queue_bound),
        )
        with self._lock:
            self._subs[sub.id] = sub
            if sub.mode in ("push", "local"):
                worker = threading.Thread(target=self._push_worker,
                                          args=(sub,), daemon=True,
                                          name=f"push-{sub.id}")
                self._workers[sub.id] = worker
                worker.start()
        return sub

    def unsubscribe(self, sub_id: str) -> bool:
        with self._lock:
            sub = self._subs.pop(sub_id, None)
        if sub is None:
            return False
        sub.queue.put(None)   # wake the worker so it can exit
        return True

    def get(self, sub_id: str) -> Optional[Subscription]:
        with self._lock:
            return self._subs.get(sub_id)

    def list_subscriptions(self) -> list[Subscription]:
        with self._lock:
            return list(self._subs.values())

    def sse_url(self, sub: Subscription) -> str:
        return f"{self.base_url}/subscriptions/{sub.id}/sse"

    # -- event fan-out -------------------------------------------------------

    def _on_bus_message(self, message: BusMessage) -> None:
        envelope = message.envelope()
        with self._lock:
            subs = list(self._subs.values())
        for sub in subs:
            if sub.wants_event(message.topic, message.event):
                dropped = sub.queue.put(envelope)
                if dropped and message.topic != "status":
                    self.bus.publish(BusMessage(
                        kind="event", topic="status", event="delivery_warning",
                        instance_id=message.instance_id,
                        instance_uuid=message.instance_uuid,
                        payload={"subscription": sub.id, "dropped": dropped}))

    def _push_worker(self, sub: Subscription) -> None:
        while True:
            item = sub.queue.get(timeout=1.0)
            with self._lock:
                alive = sub.id in self._subs
            if not alive:
                return
            if item is None:
                continue
            self._push_one(sub, item)

    def _push_one(self, sub: Subscription, envelope: dict[str, Any]) -> None:
        if sub.local_handler is not None:
            try:
                sub.local_handler(envelope)
            except Exception:
                pass
            return
        import requests
        for _attempt in range(self.push_retries):
            try:
                requests.post(sub.push_endpoint, json=envelope,
                              timeout=self.push_timeout)
                return
            except requests.RequestException:
                continue
        self.bus.publish(BusMessage(
            kind="event", topic="status", event="delivery_warning",
            instance_id=envelope.get("instance"),
            instance_uuid=envelope.get("instance-uuid"),
            payload={"subscription": sub.id, "dropped": 1,
                     "reason": "push failed"}))

    # -- votes ---------------------------------------------------------------

    def collect_verdict(self, topic: str, event: str, instance,
                        content: dict[str, Any], context: str) -> Verdict:
        responses = self.collect_votes(topic, event, instance, content)
        return combine_votes(responses, context=context)

    def collect_votes(self, topic: str, event: str, instance,
                      content: dict[str, Any]) -> list[VoteResponse]:
        with self._lock:
            voters = [s for s in self._subs.values()
                      if s.wants_vote(topic, event)]
        if not voters:
            return []
        envelope_base = BusMessage(
            kind="vote", topic=topic, event=event,
            instance_id=getattr(instance, "id", None),
            instance_uuid=getattr(instance, "uuid", None),
            payload=content).envelope()

        responses: list[VoteResponse] = []
        threads = []
        lock = threading.Lock()

        def ask(sub: Subscription) -> None:
            response = self._ask_one(sub, dict(envelope_base))
            with lock:
                responses.append(response)

        for sub in voters:
            t = threading.Thread(target=ask, args=(sub,), daemon=True)
            threads.append(t)
            t.start()
        deadline = self.vote_callback_ceiling + self.vote_timeout
        for t in threads:
            t.join(deadline)
        with lock:
            # anything unanswered degrades to ack
            while len(responses) < len(voters):
                responses.append(VoteResponse("ack"))
            return list(responses)

    def _ask_one(self, sub: Subscription,
                 envelope: dict[str, Any]) -> VoteResponse:
        vote_id = secrets.token_urlsafe(9)
        envelope["vote"] = True
        envelope["vote-id"] = vote_id
        envelope["vote-callback"] = \
            f"{self.base_url}/subscriptions/{sub.id}/votes/{vote_id}"
        answered = threading.Event()
        holder: list = []
        with self._lock:
            self._pending_votes[vote_id] = (answered, holder)
        try:
            first = self._initial_vote_answer(sub, envelope)
            if first is not None and first.kind != "callback":
                return first
            # callback (or SSE): the answer arrives as a PUT, or times out
            wait = self.vote_callback_ceiling if first is not None \
                else self.vote_timeout
            if answered.wait(wait) and holder:
                return holder[0]
            return VoteResponse("ack")
        finally:
            with self._lock:
                self._pending_votes.pop(vote_id, None)

    def _initial_vote_answer(self, sub: Subscription,
                             envelope: dict[str, Any]) -> Optional[VoteResponse]:
        """Push/local subscribers answer in the HTTP response; SSE subscribers
        get the vote on their stream and answer via the vote-callback PUT."""
        if sub.local_handler is not None:
            try:
                raw = sub.local_handler(envelope)
            except Exception:
                return VoteResponse("ack")
            if raw is None:
                return VoteResponse("ack")
            try:
                return VoteResponse.from_dict(raw)
            except ValueError:
                return VoteResponse("ack")
        if sub.push_endpoint:
            import requests
            try:
                resp = requests.post(sub.push_endpoint, json=envelope,
                                     timeout=self.vote_timeout)
                raw = resp.json()
            except (requests.RequestException, ValueError):
                return VoteResponse("ack")
            try:
                return VoteResponse.from_dict(raw)
            except ValueError:
                return VoteResponse("ack")
        sub.queue.put(envelope)
        return None

    def receive_vote_response(self, vote_id: str,
                              raw: dict[str, Any]) -> bool:
        with self._lock:
            pending = self._pending_votes.get(vote_id)
        if pending is None:
            return False
        answered, holder = pending
        try:
            holder.append(VoteResponse.from_dict(raw))
        except ValueError:
            holder.append(VoteResponse("ack"))
        answered.set()
        return True
