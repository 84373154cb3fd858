"""Small reference functionalities: a timeout service and a sub-process
spawner.

The timeout service acknowledges asynchronously and sends its final answer
once the requested duration has elapsed.  The spawner creates, loads, and
starts a process instance on a target engine, reports the child URL in its
instantiation answer, and completes once the child reaches a final state.
"""

from __future__ import annotations

import threading
import time
from typing import Any, Optional

import requests


class ServiceError(Exception):
    def __init__(self, message: str, status: int = 400):
        super().__init__(message)
        self.status = status


def _callback_url(headers: dict[str, str]) -> str:
    lowered = {k.lower(): v for k, v in headers.items()}
    url = lowered.get("cpee-callback")
    if not url:
        raise ServiceError("request carries no CPEE-CALLBACK url", 400)
    return url


# -- timeout -----------------------------------------------------------------

def start_timeout(headers: dict[str, str],
                  payload: dict[str, Any]) -> dict[str, str]:
    """Validate and schedule a timer; returns the response headers.

    A negative duration is a synchronous error (HTTP 400 upstream); zero is
    allowed and fires immediately.
    """
    duration = payload.get("duration", payload.get("timeout", 0))
    if not isinstance(duration, (int, float)):
        raise ServiceError(f"duration must be a number, got {duration!r}")
    if duration < 0:
        raise ServiceError(f"duration must not be negative, got {duration}")
    callback = _callback_url(headers)

    def fire() -> None:
        try:
            requests.put(callback, json={"waited": duration}, timeout=5)
        except requests.RequestException:
            pass

    timer = threading.Timer(float(duration), fire)
    timer.daemon = True
    timer.start()
    return {"CPEE-CALLBACK": "true"}


# -- sub-process spawner -----------------------------------------------------

def spawn_subprocess(headers: dict[str, str], payload: dict[str, Any],
                     poll_interval: float = 0.2,
                     poll_budget: float = 120.0) -> tuple[dict[str, str], str]:
    """Create and start a child instance on a target engine.

    Returns (response_headers, child_url).  The caller should answer with the
    child URL as the body.  A later PUT to the callback reports the child's
    final state and data.  If the target engine is unreachable the caller
    must answer with the salvage pattern instead.
    """
    target = payload.get("engine")
    model = payload.get("model")
    if not target:
        raise ServiceError("payload lacks the target engine base url")
    if model is None:
        raise ServiceError("payload lacks the process model to instantiate")
    callback = _callback_url(headers)
    data = payload.get("dataelements")

    try:
        created = requests.post(f"{target}/instances", timeout=5)
        created.raise_for_status()
        child_url = created.json()["url"]
        loaded = requests.put(f"{child_url}/model", json=model, timeout=5)
        loaded.raise_for_status()
        if data:
            requests.patch(f"{child_url}/dataelements", json=data,
                           timeout=5).raise_for_status()
        started = requests.put(f"{child_url}/state",
                               json={"state": "running"}, timeout=5)
        started.raise_for_status()
    except requests.RequestException as exc:
        raise ServiceError(f"target engine unreachable: {exc}", 502) from exc

    def watch() -> None:
        deadline = time.monotonic() + poll_budget
        final = "abandoned"
        child_data: Any = {}
        while time.monotonic() < deadline:
            try:
                doc = requests.get(child_url, timeout=5).json()
            except (requests.RequestException, ValueError):
                time.sleep(poll_interval)
                continue
            if doc.get("state") in ("finished", "stopped", "abandoned"):
                final = doc["state"]
                child_data = doc.get("dataelements", {})
                break
            time.sleep(poll_interval)
        answer = {"child": child_url, "state": final,
                  "dataelements": child_data}
        put_headers = {}
        if final != "finished":
            put_headers["CPEE-SALVAGE"] = "true"
        try:
            requests.put(callback, json=answer, headers=put_headers, timeout=5)
        except requests.RequestException:
            pass

    threading.Thread(target=watch, daemon=True).start()
    return ({"CPEE-CALLBACK": "true", "CPEE-INSTANTIATION": "true"}, child_url)
