"""Shared test helpers: in-process runtimes, fake services, event capture."""

from __future__ import annotations

import socket
import threading
import time
from typing import Any, Callable, Optional

import pytest

from procflow.bus import BusMessage
from procflow.engine import EngineConfig
from procflow.protocol import LocalTransport, TransportResponse
from procflow.runtime import EngineRuntime


def free_port() -> int:
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class EventCollector:
    """Records every bus event in publish order."""

    def __init__(self, runtime: EngineRuntime):
        self.messages: list[BusMessage] = []
        self._lock = threading.Lock()
        runtime.bus.subscribe(self._on, matcher=lambda m: m.kind == "event")

    def _on(self, message: BusMessage) -> None:
        with self._lock:
            self.messages.append(message)

    def pairs(self, instance_id: Optional[int] = None) -> list[tuple[str, str]]:
        with self._lock:
            return [(m.topic, m.event) for m in self.messages
                    if instance_id is None or m.instance_id == instance_id]

    def of_topic(self, topic: str,
                 instance_id: Optional[int] = None) -> list[BusMessage]:
        with self._lock:
            return [m for m in self.messages if m.topic == topic
                    and (instance_id is None or m.instance_id == instance_id)]

    def wait_for(self, predicate: Callable[[BusMessage], bool],
                 timeout: float = 10.0) -> Optional[BusMessage]:
        deadline = time.monotonic() + timeout
        while time.monotonic() < deadline:
            with self._lock:
                for m in self.messages:
                    if predicate(m):
                        return m
            time.sleep(0.01)
        return None


def make_local_runtime(**config_overrides) -> tuple[EngineRuntime, LocalTransport]:
    transport = LocalTransport()
    config = EngineConfig(retry_delay=0.01, **config_overrides)
    runtime = EngineRuntime(config=config, transport=transport)
    return runtime, transport


def sync_echo(method: str, url: str, headers: dict[str, str],
              body: Any) -> TransportResponse:
    return TransportResponse(status=200, headers={}, body=body or {"ok": True})


def register_echo(transport: LocalTransport,
                  prefix: str = "http://svc/echo") -> None:
    transport.register(prefix, sync_echo)


# -- model document builders -------------------------------------------------

_counter = [0]


def nid() -> str:
    _counter[0] += 1
    return f"n{_counter[0]}"


def call(node_id: str, endpoint_key: str = "svc", **extra) -> dict[str, Any]:
    return {"id": node_id, "kind": "call", "endpoint_key": endpoint_key,
            **extra}


def manip(node_id: str, finalize: str, **extra) -> dict[str, Any]:
    return {"id": node_id, "kind": "manipulate",
            "scripts": {"finalize": finalize}, **extra}


def seq(node_id: str, *children: dict[str, Any]) -> dict[str, Any]:
    return {"id": node_id, "kind": "sequence", "children": list(children)}


def model_doc(root: dict[str, Any], endpoints: Optional[dict] = None,
              dataelements: Optional[dict] = None,
              attributes: Optional[dict] = None) -> dict[str, Any]:
    return {"root": root,
            "endpoints": endpoints or {"svc": "http://svc/echo"},
            "dataelements": dataelements or {},
            "attributes": attributes or {}}


def run_to_completion(runtime: EngineRuntime, document: dict[str, Any],
                      timeout: float = 20.0):
    """Create, load, start, and wait for a resting state."""
    engine = runtime.engine
    instance = engine.create_instance()
    engine.mutate_context(instance, {"model": document})
    engine.transition(instance, "running", "command")
    assert engine.wait_idle(instance, timeout=timeout), \
        f"instance stuck in state {instance.state}"
    return instance


@pytest.fixture
def local_runtime():
    runtime, transport = make_local_runtime()
    register_echo(transport)
    yield runtime, transport
    runtime.shutdown()
