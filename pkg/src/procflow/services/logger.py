"""Event-log writer producing one XES XML file per process instance.

It subscribes to the data stream (as a push target or an in-process handler)
and appends each received event to the trace of the originating instance,
identified by the instance uuid.  Activity state changes become lifecycle
transitions; task transitions from external functionalities are kept in a
separate attribute so standard mining tools do not confuse the two
lifecycles.
"""

from __future__ import annotations

import json
import threading
import xml.etree.ElementTree as ET
from pathlib import Path
from typing import Any, Optional

XES_NS = "http://www.xes-standard.org/"

# activity lifecycle states mapped onto the standard lifecycle extension
LIFECYCLE_MAP = {
    "calling": "start",
    "receiving": "resume",
    "manipulating": "resume",
    "failed": "pi_abort",
    "status": "resume",
    "done": "complete",
    "syncing_before": "schedule",
    "syncing_after": "complete",
}


def _string(parent: ET.Element, key: str, value: str) -> None:
    ET.SubElement(parent, "string", {"key": key, "value": value})


class XesLogWriter:
    """Accumulates events per instance uuid and writes XES files."""

    def __init__(self, directory: str):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.RLock()
        self._traces: dict[str, list[dict[str, Any]]] = {}

    def record(self, envelope: dict[str, Any]) -> None:
        uuid = envelope.get("instance-uuid") or "unknown"
        with self._lock:
            self._traces.setdefault(uuid, []).append(envelope)
            self._write(uuid)

    # -- XES assembly --------------------------------------------------------

    def _event_element(self, envelope: dict[str, Any]) -> ET.Element:
        event = ET.Element("event")
        topic = envelope.get("topic", "")
        name = envelope.get("event", "")
        content = envelope.get("content") or {}
        label = ""
        if isinstance(content, dict):
            label = content.get("label") or content.get("activity") or ""
        _string(event, "concept:name", label or f"{topic}/{name}")
        if topic == "activity" and name in LIFECYCLE_MAP:
            _string(event, "lifecycle:transition", LIFECYCLE_MAP[name])
        if topic == "task":
            # task lifecycle lives beside, not inside, the activity lifecycle
            _string(event, "task:state", name)
        _string(event, "stream:topic", topic)
        _string(event, "stream:event", name)
        if isinstance(content, dict) and content.get("enactment"):
            _string(event, "enactment", str(content["enactment"]))
        timestamp = envelope.get("timestamp", "")
        ET.SubElement(event, "date",
                      {"key": "time:timestamp", "value": timestamp})
        _string(event, "stream:payload",
                json.dumps(content, sort_keys=True, default=str))
        return event

    def _write(self, uuid: str) -> None:
        log = ET.Element("log", {
            "xes.version": "1.0",
            "xmlns": XES_NS,
        })
        ext = ET.SubElement(log, "extension", {
            "name": "Lifecycle", "prefix": "lifecycle",
            "uri": "http://www.xes-standard.org/lifecycle.xesext"})
        ext.tail = None
        ET.SubElement(log, "extension", {
            "name": "Concept", "prefix": "concept",
            "uri": "http://www.xes-standard.org/concept.xesext"})
        ET.SubElement(log, "extension", {
            "name": "Time", "prefix": "time",
            "uri": "http://www.xes-standard.org/time.xesext"})
        trace = ET.SubElement(log, "trace")
        _string(trace, "concept:name", uuid)
        for envelope in self._traces[uuid]:
            trace.append(self._event_element(envelope))
        tree = ET.ElementTree(log)
        ET.indent(tree)
        path = self.directory / f"{uuid}.xes"
        tmp = path.with_suffix(".xes.tmp")
        tree.write(tmp, encoding="utf-8", xml_declaration=True)
        tmp.replace(path)

    def path_for(self, uuid: str) -> Path:
        return self.directory / f"{uuid}.xes"

    def event_count(self, uuid: str) -> int:
        with self._lock:
            return len(self._traces.get(uuid, []))


# subscription selections covering everything the log should contain
LOG_SELECTIONS = [
    {"topic": "state", "events": ["*"]},
    {"topic": "activity", "events": ["*"]},
    {"topic": "task", "events": ["*"]},
    {"topic": "position", "events": ["*"]},
    {"topic": "dataelements", "events": ["*"]},
    {"topic": "endpoints", "events": ["*"]},
    {"topic": "attributes", "events": ["*"]},
    {"topic": "condition", "events": ["*"]},
    {"topic": "description", "events": ["*"]},
    {"topic": "status", "events": ["*"]},
]


def attach_logger(gateway, directory: str,
                  instance: Optional[int] = None) -> XesLogWriter:
    """Subscribe an in-process log writer to a data stream gateway."""
    writer = XesLogWriter(directory)
    spec: dict[str, Any] = {"mode": "local",
                            "selections": LOG_SELECTIONS}
    if instance is not None:
        spec["instance"] = instance
    gateway.subscribe(spec, local_handler=writer.record)
    return writer
