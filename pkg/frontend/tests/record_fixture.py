"""Record a raw SSE stream from a served engine for the replay tests.

Runs the repair/steering scenario (broken endpoint -> stopped -> patch ->
repaired model -> finished) against an in-process engine and captures the
bytes exactly as they left the SSE endpoint, plus the final instance
document for cross-checking.  Run from this directory:

    python3 record_fixture.py
"""

from __future__ import annotations

import json
import pathlib
import threading
import time

import requests

from procflow.engine import EngineConfig
from procflow.protocol import LocalTransport, TransportResponse
from procflow.runtime import EngineRuntime
from procflow.server import ServerHandle

FIXTURES = pathlib.Path(__file__).parent / "fixtures"

TOPICS = ["state", "activity", "position", "status", "dataelements",
          "description", "endpoints", "attributes", "condition", "task"]

BROKEN_MODEL = {
    "root": {"id": "root", "kind": "sequence", "children": [
        {"id": "pre", "kind": "manipulate",
         "scripts": {"finalize": "data.pre = 1"}},
        {"id": "work", "kind": "call", "endpoint_key": "svc",
         "scripts": {"finalize": "data.work = result.ok"}}]},
    "endpoints": {"svc": "http://svc/broken"},
}

REPAIRED_MODEL = {
    "root": {"id": "root", "kind": "sequence", "children": [
        {"id": "pre", "kind": "manipulate",
         "scripts": {"finalize": "data.pre = 1"}},
        {"id": "work", "kind": "call", "endpoint_key": "svc",
         "scripts": {"finalize": "data.work = result.ok"}},
        {"id": "inserted", "kind": "manipulate",
         "scripts": {"finalize": "data.extra = true"}}]},
    "endpoints": {},
}


def free_port() -> int:
    import socket
    with socket.socket() as sock:
        sock.bind(("127.0.0.1", 0))
        return sock.getsockname()[1]


def wait_state(root: str, iid: int, wanted: str, timeout: float = 15) -> None:
    deadline = time.monotonic() + timeout
    while time.monotonic() < deadline:
        state = requests.get(f"{root}/instances/{iid}/state",
                             timeout=5).json()["state"]
        if state == wanted:
            return
        time.sleep(0.05)
    raise AssertionError(f"instance never reached {wanted}")


def main() -> None:
    transport = LocalTransport()
    transport.register(
        "http://svc/echo",
        lambda method, url, headers, body: TransportResponse(
            200, {}, {"ok": True}))
    transport.register(
        "http://svc/broken",
        lambda method, url, headers, body: TransportResponse(500, {}, "down"))

    port = free_port()
    root = f"http://127.0.0.1:{port}"
    runtime = EngineRuntime(
        config=EngineConfig(base_url=f"{root}/instances", retry_delay=0.01,
                            heartbeat_interval=0.5),
        transport=transport, server_root=root)
    handle = ServerHandle(runtime, port=port)
    handle.start()
    captured = bytearray()
    stop_reading = threading.Event()

    try:
        sub = requests.post(f"{root}/subscriptions", json={
            "selections": [{"topic": t, "event": "*"} for t in TOPICS],
        }, timeout=5).json()

        def read_stream() -> None:
            with requests.get(sub["sse_url"], stream=True, timeout=30) as res:
                for chunk in res.iter_content(chunk_size=1):
                    captured.extend(chunk)
                    if stop_reading.is_set():
                        return

        reader = threading.Thread(target=read_stream, daemon=True)
        reader.start()
        time.sleep(0.2)

        iid = requests.post(f"{root}/instances", timeout=5).json()["id"]
        requests.put(f"{root}/instances/{iid}/model", json=BROKEN_MODEL,
                     timeout=5).raise_for_status()
        requests.put(f"{root}/instances/{iid}/state",
                     json={"state": "running"}, timeout=5).raise_for_status()
        wait_state(root, iid, "stopped")

        requests.patch(f"{root}/instances/{iid}/endpoints",
                       json={"change": {"svc": "http://svc/echo"}},
                       timeout=5).raise_for_status()
        requests.put(f"{root}/instances/{iid}/model", json=REPAIRED_MODEL,
                     timeout=5).raise_for_status()
        requests.put(f"{root}/instances/{iid}/state",
                     json={"state": "running"}, timeout=5).raise_for_status()
        wait_state(root, iid, "finished")

        time.sleep(1.0)  # let the stream drain the trailing events
        stop_reading.set()
        final = requests.get(f"{root}/instances/{iid}", timeout=5).json()
        time.sleep(1.0)  # a heartbeat unblocks the reader thread
    finally:
        handle.stop()

    FIXTURES.mkdir(exist_ok=True)
    (FIXTURES / "recorded-stream.txt").write_bytes(bytes(captured))
    (FIXTURES / "final-instance.json").write_text(
        json.dumps(final, indent=2, sort_keys=True))
    print(f"captured {len(captured)} bytes for instance {final['id']}")


if __name__ == "__main__":
    main()
