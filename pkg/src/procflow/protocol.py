"""HTTP header-extension protocol between activity enactments and external
functionalities.

Every outgoing invocation carries the full engine header set; responses are
classified into the synchronous, asynchronous, or salvage patterns, with
optional sub-process instantiation and custom-event signals.  Asynchronous
answers arrive as PUTs against the callback endpoint and are routed through
the callback registry.
"""

from __future__ import annotations

import json
import queue
import secrets
import threading
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

from .bus import now_rfc3339

REQUEST_HEADERS = (
    "CPEE-BASE", "CPEE-INSTANCE", "CPEE-INSTANCE-URL", "CPEE-INSTANCE-UUID",
    "CPEE-CALLBACK", "CPEE-CALLBACK-ID", "CPEE-ACTIVITY", "CPEE-LABEL",
)


class ProtocolError(Exception):
    pass


class InvocationFailed(Exception):
    """Connect failure, HTTP >= 400, or timeout; the activity fails."""

    def __init__(self, reason: str, status: Optional[int] = None):
        super().__init__(reason)
        self.reason = reason
        self.status = status


@dataclass
class TransportResponse:
    status: int
    headers: dict[str, str]
    body: Any = None

    def header(self, name: str) -> Optional[str]:
        lowered = {k.lower(): v for k, v in self.headers.items()}
        return lowered.get(name.lower())


class Transport:
    """Outgoing request seam; the default speaks HTTP, tests may run in-process."""

    def request(self, method: str, url: str, headers: dict[str, str],
                body: Any, timeout: float) -> TransportResponse:
        raise NotImplementedError


class HttpTransport(Transport):
    def request(self, method: str, url: str, headers: dict[str, str],
                body: Any, timeout: float) -> TransportResponse:
        import requests
        try:
            resp = requests.request(
                method, url, headers=headers, timeout=timeout,
                json=body if body is not None else None)
        except requests.RequestException as exc:
            raise InvocationFailed(f"connect failure: {exc}") from exc
        try:
            payload = resp.json()
        except ValueError:
            payload = resp.text
        return TransportResponse(status=resp.status_code,
                                 headers=dict(resp.headers), body=payload)


LocalHandler = Callable[[str, str, dict[str, str], Any], TransportResponse]


class LocalTransport(Transport):
    """Routes URLs by longest matching prefix to in-process handlers."""

    def __init__(self) -> None:
        self._routes: list[tuple[str, LocalHandler]] = []

    def register(self, url_prefix: str, handler: LocalHandler) -> None:
        self._routes.append((url_prefix, handler))
        self._routes.sort(key=lambda r: -len(r[0]))

    def request(self, method: str, url: str, headers: dict[str, str],
                body: Any, timeout: float) -> TransportResponse:
        for prefix, handler in self._routes:
            if url.startswith(prefix):
                return handler(method, url, headers, body)
        raise InvocationFailed(f"no route for {url}")


@dataclass
class InvokeContext:
    base: str
    instance_id: int
    instance_url: str
    instance_uuid: str
    callback_url: str
    callback_id: str
    activity_id: str
    label: str = ""

    def headers(self) -> dict[str, str]:
        return {
            "CPEE-BASE": self.base,
            "CPEE-INSTANCE": str(self.instance_id),
            "CPEE-INSTANCE-URL": self.instance_url,
            "CPEE-INSTANCE-UUID": self.instance_uuid,
            "CPEE-CALLBACK": self.callback_url,
            "CPEE-CALLBACK-ID": self.callback_id,
            "CPEE-ACTIVITY": self.activity_id,
            "CPEE-LABEL": self.label,
        }


@dataclass
class InvocationOutcome:
    pattern: str                    # "synchronous" | "asynchronous" | "salvage"
    body: Any = None
    spawned_url: Optional[str] = None
    custom_event: Optional[str] = None


def _flag(resp: TransportResponse, name: str) -> bool:
    value = resp.header(name)
    if value is None:
        return False
    if value.lower() != "true":
        raise ProtocolError(f"{name} header must be \"true\", got {value!r}")
    return True


def classify_response(resp: TransportResponse) -> InvocationOutcome:
    if resp.status >= 400:
        raise InvocationFailed(f"functionality answered HTTP {resp.status}",
                               status=resp.status)
    wants_callback = _flag(resp, "CPEE-CALLBACK")
    salvage = _flag(resp, "CPEE-SALVAGE")
    instantiation = _flag(resp, "CPEE-INSTANTIATION")
    custom_event = resp.header("CPEE-EVENT")
    if salvage and wants_callback:
        raise ProtocolError("CPEE-SALVAGE cannot be combined with CPEE-CALLBACK")
    spawned = None
    if instantiation:
        spawned = resp.body if isinstance(resp.body, str) else \
            (resp.body or {}).get("url") if isinstance(resp.body, dict) else None
        if not spawned:
            raise ProtocolError("CPEE-INSTANTIATION response lacks the "
                                "instance url in its body")
    if salvage:
        return InvocationOutcome(pattern="salvage", custom_event=custom_event)
    if wants_callback:
        return InvocationOutcome(pattern="asynchronous", spawned_url=spawned,
                                 custom_event=custom_event)
    return InvocationOutcome(pattern="synchronous", body=resp.body,
                             spawned_url=spawned, custom_event=custom_event)


def invoke(transport: Transport, endpoint: str, parameters: dict[str, Any],
           ctx: InvokeContext, arguments: Any = None,
           timeout: float = 30.0) -> InvocationOutcome:
    """Send one activity invocation and classify the answer.

    `parameters` may set "method" (default POST); `arguments` is the
    JSON-encoded request body.
    """
    method = parameters.get("method", "POST").upper()
    resp = transport.request(method, endpoint, ctx.headers(), arguments, timeout)
    return classify_response(resp)


# -- callback registry -------------------------------------------------------

@dataclass
class CallbackRecord:
    callback_id: str
    instance_id: int
    activity_id: str
    enactment_id: str
    created_at: str = field(default_factory=now_rfc3339)
    suspended: bool = False
    # delivery channel for the waiting enactment; not persisted
    channel: "queue.Queue[tuple[Any, bool]]" = field(
        default_factory=queue.Queue, repr=False, compare=False)

    def to_dict(self) -> dict[str, Any]:
        return {
            "callback_id": self.callback_id,
            "instance_id": self.instance_id,
            "activity_id": self.activity_id,
            "enactment_id": self.enactment_id,
            "created_at": self.created_at,
            "suspended": self.suspended,
        }


def new_callback_id() -> str:
    # token_urlsafe(16) carries 128 bits of randomness
    return secrets.token_urlsafe(16)


class CallbackRegistry:
    """Pending asynchronous answer slots, keyed by unguessable callback id."""

    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._records: dict[str, CallbackRecord] = {}

    def create(self, instance_id: int, activity_id: str,
               enactment_id: str) -> CallbackRecord:
        with self._lock:
            record = CallbackRecord(callback_id=new_callback_id(),
                                    instance_id=instance_id,
                                    activity_id=activity_id,
                                    enactment_id=enactment_id)
            self._records[record.callback_id] = record
            return record

    def get(self, callback_id: str) -> Optional[CallbackRecord]:
        with self._lock:
            return self._records.get(callback_id)

    def deliver(self, callback_id: str, payload: Any, update: bool,
                event: Optional[str] = None, salvage: bool = False) -> str:
        """Returns "delivered", "unknown", or "suspended".

        A final (non-update) delivery removes the record, so any later PUT
        against the same id is unknown.  PUTs are responses of the
        asynchronous pattern, so they may carry the optional response
        headers; a salvage PUT fails the waiting enactment.
        """
        with self._lock:
            record = self._records.get(callback_id)
            if record is None:
                return "unknown"
            if record.suspended:
                return "suspended"
            if not update:
                del self._records[callback_id]
        record.channel.put((payload, update, event, salvage))
        return "delivered"

    def remove(self, callback_id: str) -> None:
        with self._lock:
            self._records.pop(callback_id, None)

    def suspend_instance(self, instance_id: int) -> int:
        with self._lock:
            count = 0
            for record in self._records.values():
                if record.instance_id == instance_id:
                    record.suspended = True
                    count += 1
            return count

    def resume_instance(self, instance_id: int) -> int:
        with self._lock:
            count = 0
            for record in self._records.values():
                if record.instance_id == instance_id:
                    record.suspended = False
                    count += 1
            return count

    def records_for(self, instance_id: int) -> list[CallbackRecord]:
        with self._lock:
            return [r for r in self._records.values()
                    if r.instance_id == instance_id]

    def drop_instance(self, instance_id: int) -> int:
        with self._lock:
            doomed = [cid for cid, r in self._records.items()
                      if r.instance_id == instance_id]
            for cid in doomed:
                del self._records[cid]
            return len(doomed)

    def restore(self, raw: dict[str, Any]) -> CallbackRecord:
        with self._lock:
            record = CallbackRecord(
                callback_id=raw["callback_id"],
                instance_id=raw["instance_id"],
                activity_id=raw["activity_id"],
                enactment_id=raw["enactment_id"],
                created_at=raw.get("created_at", now_rfc3339()),
                suspended=raw.get("suspended", False),
            )
            self._records[record.callback_id] = record
            return record


# -- service-side helper -----------------------------------------------------

def respond_async(request_headers: dict[str, str]) -> dict[str, str]:
    """Build the response headers for an "answer later" acknowledgment.

    Returns the headers to send; the service must remember the request's
    CPEE-CALLBACK URL for its later PUTs.  Raises ProtocolError when the
    request carried no callback URL (the service must answer synchronously).
    """
    lowered = {k.lower(): v for k, v in request_headers.items()}
    callback_url = lowered.get("cpee-callback")
    if not callback_url:
        raise ProtocolError("request carries no CPEE-CALLBACK url; "
                            "only a synchronous answer is possible")
    return {"CPEE-CALLBACK": "true"}
