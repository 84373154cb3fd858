"""Engine core: instance registry, instance lifecycle state machine, context
mutation, and persistence.

Every instance runs as an isolated execution unit (its own thread tree) that
talks to the rest of the engine only through the bus and the callback
registry.  Commands from the control surface are serialized per instance.
"""

from __future__ import annotations

import threading
import uuid as uuid_module
from dataclasses import dataclass, field
from typing import Any, Optional

from .bus import Bus, BusMessage
from .model import (ModelError, Position, ProcessModel, empty_model,
                    parse_model, validate)
from .persistence import MemoryPersistence, PersistenceAdapter
from .protocol import CallbackRegistry
from .votes import Verdict

STATES = ("ready", "running", "stopping", "stopped", "finished",
          "abandoned", "purged")
CAUSES = ("command", "error", "completion")

# (from, to) -> allowed causes.  finished and purged are terminal; finished is
# reachable only through successful completion, never by command.
LEGAL_EDGES: dict[tuple[str, str], frozenset[str]] = {
    ("ready", "running"): frozenset({"command"}),
    ("ready", "abandoned"): frozenset({"command"}),
    ("running", "stopping"): frozenset({"command", "error"}),
    ("running", "finished"): frozenset({"completion"}),
    ("running", "purged"): frozenset({"command"}),
    ("stopping", "stopped"): frozenset({"completion"}),
    ("stopped", "running"): frozenset({"command"}),
    ("stopped", "abandoned"): frozenset({"command"}),
    ("abandoned", "purged"): frozenset({"command"}),
}

FROZEN_STATES = ("finished", "abandoned", "purged")


class EngineError(Exception):
    pass


class UnknownInstance(EngineError):
    pass


class IllegalTransition(EngineError):
    def __init__(self, current: str, target: str, cause: str = "command"):
        super().__init__(f"illegal transition {current} -> {target} "
                         f"(cause {cause})")
        self.current = current
        self.target = target


class IllegalState(EngineError):
    pass


class VoteRejected(EngineError):
    pass


@dataclass
class EngineConfig:
    base_url: str = "http://localhost:8000/instances"
    vote_timeout: float = 10.0
    vote_callback_ceiling: float = 60.0
    drain_timeout: float = 60.0
    invoke_timeout: float = 30.0
    retry_delay: float = 1.0
    max_retries: int = 5
    heartbeat_interval: float = 15.0
    push_timeout: float = 5.0
    push_retries: int = 3
    queue_bound: int = 10_000


@dataclass
class Instance:
    id: int
    uuid: str
    state: str = "ready"
    model: ProcessModel = field(default_factory=empty_model)
    dataelements: dict[str, Any] = field(default_factory=dict)
    endpoints: dict[str, str] = field(default_factory=dict)
    attributes: dict[str, str] = field(default_factory=dict)
    positions: list[Position] = field(default_factory=list)
    status: dict[str, Any] = field(default_factory=lambda: {"code": 0, "text": "ok"})
    spawned: list[str] = field(default_factory=list)
    enactment_counters: dict[str, int] = field(default_factory=dict)
    model_loaded: bool = False
    lock: threading.RLock = field(default_factory=threading.RLock,
                                  repr=False, compare=False)
    stop_requested: threading.Event = field(default_factory=threading.Event,
                                            repr=False, compare=False)

    @property
    def url_suffix(self) -> str:
        return f"/{self.id}"

    def next_enactment(self, activity_id: str) -> str:
        with self.lock:
            n = self.enactment_counters.get(activity_id, 0) + 1
            self.enactment_counters[activity_id] = n
            return f"{activity_id}-enactment-{n}"

    def snapshot(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "uuid": self.uuid,
            "state": self.state,
            "model": self.model.to_dict(),
            "dataelements": dict(self.dataelements),
            "endpoints": dict(self.endpoints),
            "attributes": dict(self.attributes),
            "positions": [p.to_dict() for p in self.positions],
            "status": dict(self.status),
            "spawned": list(self.spawned),
            "enactment_counters": dict(self.enactment_counters),
            "model_loaded": self.model_loaded,
        }

    @classmethod
    def from_snapshot(cls, raw: dict[str, Any]) -> "Instance":
        return cls(
            id=raw["id"],
            uuid=raw["uuid"],
            state=raw["state"],
            model=parse_model(raw["model"], executable=False),
            dataelements=dict(raw.get("dataelements", {})),
            endpoints=dict(raw.get("endpoints", {})),
            attributes=dict(raw.get("attributes", {})),
            positions=[Position.from_dict(p) for p in raw.get("positions", [])],
            status=dict(raw.get("status", {"code": 0, "text": "ok"})),
            spawned=list(raw.get("spawned", [])),
            enactment_counters=dict(raw.get("enactment_counters", {})),
            model_loaded=raw.get("model_loaded", False),
        )


class NullShaper:
    """Vote collector used when no gateway is attached: everything proceeds."""

    def collect_verdict(self, topic: str, event: str, instance: "Instance",
                        content: dict[str, Any], context: str) -> Verdict:
        return Verdict(actions=(("proceed",),))


def _change_triple(old: dict, new: dict) -> dict[str, Any]:
    added = {k: new[k] for k in new if k not in old}
    deleted = {k: old[k] for k in old if k not in new}
    changed = {k: {"from": old[k], "to": new[k]}
               for k in new if k in old and old[k] != new[k]}
    return {"added": added, "deleted": deleted, "changed": changed}


class Engine:
    def __init__(self, config: Optional[EngineConfig] = None,
                 persistence: Optional[PersistenceAdapter] = None,
                 bus: Optional[Bus] = None):
        self.config = config or EngineConfig()
        self.persistence = persistence or MemoryPersistence()
        self.bus = bus or Bus()
        self.callbacks = CallbackRegistry()
        self.shaper = NullShaper()        # replaced by the datastream gateway
        self.transport = None             # set by the runtime composition
        self._lock = threading.RLock()
        self._instances: dict[int, Instance] = {}
        self._units: dict[int, Any] = {}  # instance id -> execution unit
        self._next_id = 1
        self._restore()

    # -- registry ------------------------------------------------------------

    def _restore(self) -> None:
        for iid, raw in sorted(self.persistence.load_all().items()):
            if raw.get("state") not in ("ready", "stopped", "finished", "abandoned"):
                continue
            instance = Instance.from_snapshot(raw)
            self._instances[instance.id] = instance
            self._next_id = max(self._next_id, instance.id + 1)
            for cb in raw.get("callbacks", []):
                self.callbacks.restore(cb)

    def create_instance(self) -> Instance:
        with self._lock:
            instance = Instance(id=self._next_id, uuid=str(uuid_module.uuid4()))
            self._next_id += 1
            self._instances[instance.id] = instance
        self._save(instance)
        self.emit("state", "change", instance,
                  {"state": "ready", "from": None})
        return instance

    def get(self, instance_id: int) -> Instance:
        with self._lock:
            instance = self._instances.get(instance_id)
        if instance is None:
            raise UnknownInstance(f"no instance {instance_id}")
        return instance

    def list_instances(self) -> list[Instance]:
        with self._lock:
            return sorted(self._instances.values(), key=lambda i: i.id)

    # -- events --------------------------------------------------------------

    def emit(self, topic: str, event: str, instance: Optional[Instance],
             content: dict[str, Any]) -> None:
        self.bus.publish(BusMessage(
            kind="event", topic=topic, event=event,
            instance_id=instance.id if instance else None,
            instance_uuid=instance.uuid if instance else None,
            payload=content))

    def publish(self, message: BusMessage) -> None:
        self.bus.publish(message)

    def subscribe_bus(self, handler, matcher=None) -> int:
        return self.bus.subscribe(handler, matcher)

    def _save(self, instance: Instance) -> None:
        snap = instance.snapshot()
        snap["callbacks"] = [r.to_dict()
                             for r in self.callbacks.records_for(instance.id)]
        self.persistence.save(instance.id, snap)

    # -- lifecycle -----------------------------------------------------------

    def transition(self, instance: Instance, target: str,
                   cause: str = "command") -> str:
        if target not in STATES:
            raise IllegalTransition(instance.state, target, cause)
        if cause not in CAUSES:
            raise IllegalTransition(instance.state, target, cause)
        with instance.lock:
            current = instance.state
            allowed = LEGAL_EDGES.get((current, target))
            if allowed is None or cause not in allowed:
                raise IllegalTransition(current, target, cause)

            if cause == "command" and target == "running":
                self._vote_state_change(instance, "start")
                errors = self._executability_errors(instance)
                if errors:
                    raise IllegalState("model not executable: "
                                       + "; ".join(errors))
            if cause == "command" and target == "stopping":
                self._vote_state_change(instance, "stop")

            instance.state = target
            if target == "running":
                instance.stop_requested.clear()
                self.callbacks.resume_instance(instance.id)
            if target == "stopping":
                instance.stop_requested.set()
            if target == "stopped":
                self.callbacks.suspend_instance(instance.id)
            self._save(instance)
        self.emit("state", "change", instance,
                  {"state": target, "from": current})
        self._report_utilization(instance)
        if target == "running":
            self._start_execution(instance)
        if target == "stopping":
            self._watch_drain(instance)
        if target == "purged":
            self._purge_cleanup(instance)
        return target

    def _executability_errors(self, instance: Instance) -> list[str]:
        if not instance.model_loaded:
            return []   # empty instance: runs to an immediate finish
        errors = []
        for node in instance.model.root.walk():
            if node.kind == "call" and node.endpoint_key not in instance.endpoints:
                errors.append(f"node {node.id}: endpoint key "
                              f"{node.endpoint_key!r} unbound")
        return errors

    def _vote_state_change(self, instance: Instance, event: str) -> None:
        verdict = self.shaper.collect_verdict(
            "state", event, instance,
            {"state": event, "from": instance.state}, context="state")
        self._apply_set_values(instance, verdict)
        if verdict.blocked:
            raise VoteRejected(f"state {event} vetoed: dissenting votes")
        if event == "start" and verdict.has("stop_instance"):
            raise VoteRejected("state start vetoed by a stop response")
        if event == "stop" and verdict.has("start_instance") \
                and not verdict.has("stop_instance"):
            raise VoteRejected("state stop vetoed by a start response")

    def _apply_set_values(self, instance: Instance, verdict: Verdict) -> None:
        for target, name, value in verdict.set_values:
            if target == "dataelement" and name:
                old = dict(instance.dataelements)
                instance.dataelements[name] = value
                self.emit("dataelements", "change", instance,
                          _change_triple(old, instance.dataelements))
            elif target == "endpoint" and name:
                old = dict(instance.endpoints)
                instance.endpoints[name] = str(value)
                self.emit("endpoints", "change", instance,
                          _change_triple(old, instance.endpoints))
            elif target == "attribute" and name:
                old = dict(instance.attributes)
                instance.attributes[name] = str(value)
                self.emit("attributes", "change", instance,
                          _change_triple(old, instance.attributes))

    def purge(self, instance: Instance) -> None:
        if instance.state not in ("running", "abandoned"):
            raise IllegalTransition(instance.state, "purged")
        self.transition(instance, "purged", cause="command")

    def _purge_cleanup(self, instance: Instance) -> None:
        unit = self._units.pop(instance.id, None)
        if unit is not None:
            unit.abort()
        self.callbacks.drop_instance(instance.id)
        self.persistence.delete(instance.id)
        with self._lock:
            self._instances.pop(instance.id, None)

    def set_status(self, instance: Instance, code: int, text: str) -> None:
        with instance.lock:
            if instance.status == {"code": code, "text": text}:
                return
            instance.status = {"code": code, "text": text}
            self._save(instance)
        self.emit("status", "change", instance, {"code": code, "text": text})

    def _report_utilization(self, instance: Instance) -> None:
        try:
            import psutil
            rss = psutil.Process().memory_info().rss
        except Exception:
            rss = 0
        running = sum(1 for i in self.list_instances() if i.state == "running")
        self.emit("status", "resource_utilization", instance,
                  {"memory_bytes": rss, "active_instances": running})

    # -- execution unit hooks ------------------------------------------------

    def _start_execution(self, instance: Instance) -> None:
        from .executor import ExecutionUnit
        unit = ExecutionUnit(self, instance)
        self._units[instance.id] = unit
        unit.start()

    def _watch_drain(self, instance: Instance) -> None:
        unit = self._units.get(instance.id)

        def drain() -> None:
            if unit is not None:
                drained = unit.wait_drained(self.config.drain_timeout)
                if not drained:
                    unit.abort()
            try:
                self.transition(instance, "stopped", cause="completion")
            except IllegalTransition:
                pass  # raced with purge
            self._units.pop(instance.id, None)

        threading.Thread(target=drain, daemon=True,
                         name=f"drain-{instance.id}").start()

    def unit_for(self, instance_id: int):
        return self._units.get(instance_id)

    def wait_idle(self, instance: Instance, timeout: float = 30.0) -> bool:
        """Test/CLI helper: wait until the instance reaches a resting state."""
        import time
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            if instance.state in ("ready", "stopped", "finished", "abandoned",
                                  "purged"):
                return True
            time.sleep(0.01)
        return False

    # -- context mutation ----------------------------------------------------

    def mutate_context(self, instance: Instance, changes: dict[str, Any],
                       by_activity: bool = False) -> dict[str, Any]:
        """Apply a change set {dataelements?, endpoints?, attributes?,
        positions?, model?} atomically.

        Control-interface mutations require a non-running instance; activity
        enactments may change dataelements/endpoints/attributes at runtime.
        Each category change is votable and emits one change event.
        """
        report: dict[str, Any] = {}
        with instance.lock:
            if instance.state in FROZEN_STATES:
                raise IllegalState(f"instance is {instance.state}; "
                                   "no mutation accepted")
            settable = instance.state in ("ready", "stopped")
            if not settable and not by_activity:
                raise IllegalState(f"instance is {instance.state}; control "
                                   "changes require ready or stopped")
            if ("model" in changes or "positions" in changes) and not settable:
                raise IllegalState("model/position changes require a "
                                   "non-running instance")

            for category in ("dataelements", "endpoints", "attributes"):
                if category not in changes:
                    continue
                old = dict(getattr(instance, category))
                new = self._merge_patch(old, changes[category], category)
                triple = _change_triple(old, new)
                triple = self._vote_change(instance, category, triple, new)
                setattr(instance, category, new)
                self.emit(category, "change", instance, triple)
                report[category] = triple

            if "positions" in changes:
                positions = [Position.from_dict(p) if isinstance(p, dict) else p
                             for p in changes["positions"]]
                for p in positions:
                    node = instance.model.node(p.node_id)
                    if node is None:
                        raise ModelError([f"position names unknown node "
                                          f"{p.node_id}"])
                    if p.mode == "at" and node.kind not in ("call", "manipulate"):
                        raise ModelError([f"position at {p.node_id}: 'at' is "
                                          "valid only for activities"])
                old_positions = [p.to_dict() for p in instance.positions]
                instance.positions = positions
                payload = {"from": old_positions,
                           "to": [p.to_dict() for p in positions]}
                self.emit("position", "change", instance, payload)
                report["positions"] = payload

            if "model" in changes:
                report["model"] = self._load_model(instance, changes["model"])

            self._save(instance)
        return report

    def _merge_patch(self, old: dict, patch: Any, category: str) -> dict:
        """Patches are {add, delete, change} triples; a plain map is treated
        as add-or-change."""
        new = dict(old)
        if not isinstance(patch, dict):
            raise ModelError([f"{category} patch must be an object"])
        if not (set(patch) & {"add", "delete", "change"}):
            patch = {"add": patch}
        for k, v in (patch.get("add") or {}).items():
            new[k] = v
        for k in (patch.get("delete") or []):
            new.pop(k, None)
        for k, v in (patch.get("change") or {}).items():
            if k not in new:
                raise ModelError([f"{category} change targets unknown key {k!r}"])
            new[k] = v["to"] if isinstance(v, dict) and "to" in v else v
        if category in ("endpoints", "attributes"):
            new = {k: str(v) for k, v in new.items()}
        return new

    def _vote_change(self, instance: Instance, category: str,
                     triple: dict[str, Any], new: dict) -> dict[str, Any]:
        verdict = self.shaper.collect_verdict(category, "change", instance,
                                              triple, context=category)
        if verdict.blocked or verdict.has("stop_instance"):
            raise VoteRejected(f"{category} change vetoed")
        # value responses correct individual entries before the change lands
        target_name = {"dataelements": "dataelement", "endpoints": "endpoint",
                       "attributes": "attribute"}[category]
        for target, name, value in verdict.set_values:
            if target == target_name and name:
                new[name] = str(value) if category != "dataelements" else value
                for section in ("added", "changed"):
                    if name in triple[section]:
                        if section == "changed":
                            triple[section][name]["to"] = new[name]
                        else:
                            triple[section][name] = new[name]
        return triple

    def _load_model(self, instance: Instance, document: Any) -> dict[str, Any]:
        if isinstance(document, ProcessModel):
            model = document
        else:
            model = parse_model(document, executable=False)
        change = {"document": model.to_dict(),
                  "initial": not instance.model_loaded}
        verdict = self.shaper.collect_verdict("description", "change", instance,
                                              change, context="description")
        if verdict.blocked or verdict.has("stop_instance"):
            raise VoteRejected("description change vetoed")

        first_load = not instance.model_loaded
        instance.model = model
        instance.model_loaded = True
        old_endpoints = dict(instance.endpoints)
        old_data = dict(instance.dataelements)
        instance.endpoints.update(model.endpoints)
        instance.dataelements.update(model.dataelements)
        for k, v in model.attributes.items():
            instance.attributes[k] = v
        if first_load:
            if "modelled_from" not in instance.attributes:
                fingerprint = _model_fingerprint(model)
                instance.attributes["modelled_from"] = fingerprint
                self.emit("attributes", "change", instance,
                          {"added": {"modelled_from": fingerprint},
                           "deleted": {}, "changed": {}})
        else:
            instance.attributes["singleton"] = "true"
            self.emit("attributes", "change", instance,
                      {"added": {"singleton": "true"}, "deleted": {},
                       "changed": {}})
        self.emit("description", "change", instance, change)
        if instance.endpoints != old_endpoints:
            self.emit("endpoints", "change", instance,
                      _change_triple(old_endpoints, instance.endpoints))
        if instance.dataelements != old_data:
            self.emit("dataelements", "change", instance,
                      _change_triple(old_data, instance.dataelements))
        return change


def _model_fingerprint(model: ProcessModel) -> str:
    import hashlib
    from .model import serialize_model
    return hashlib.sha256(serialize_model(model).encode()).hexdigest()[:16]
