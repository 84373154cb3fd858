"""In-process publish/subscribe bus connecting instances, persistence, and
the event gateway.

Delivery is synchronous and in publish order per publisher, which gives
at-least-once semantics with exact per-instance ordering.  An external broker
can be slotted in by implementing the same publish/subscribe surface.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from datetime import datetime, timezone
from typing import Any, Callable, Optional


def now_rfc3339() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="milliseconds")


@dataclass(frozen=True)
class BusMessage:
    kind: str                       # event | vote | vote_response | command
    topic: str
    event: str
    instance_id: Optional[int] = None
    instance_uuid: Optional[str] = None
    payload: dict[str, Any] = field(default_factory=dict)
    correlation_id: Optional[str] = None
    timestamp: str = field(default_factory=now_rfc3339)

    def envelope(self) -> dict[str, Any]:
        """The JSON wire shape shared by bus messages and gateway events."""
        return {
            "topic": self.topic,
            "event": self.event,
            "timestamp": self.timestamp,
            "instance": self.instance_id,
            "instance-uuid": self.instance_uuid,
            "content": self.payload,
        }


class BusClosed(Exception):
    pass


MessageFilter = Callable[[BusMessage], bool]
MessageHandler = Callable[[BusMessage], None]


class Bus:
    def __init__(self) -> None:
        self._lock = threading.RLock()
        self._subscribers: dict[int, tuple[MessageFilter, MessageHandler]] = {}
        self._next = 1
        self._closed = False

    def subscribe(self, handler: MessageHandler,
                  matcher: Optional[MessageFilter] = None) -> int:
        with self._lock:
            if self._closed:
                raise BusClosed()
            sid = self._next
            self._next += 1
            self._subscribers[sid] = (matcher or (lambda _m: True), handler)
            return sid

    def unsubscribe(self, sid: int) -> None:
        with self._lock:
            self._subscribers.pop(sid, None)

    def publish(self, message: BusMessage) -> None:
        with self._lock:
            if self._closed:
                return   # shutdown: late publishers are dropped, not crashed
            targets = list(self._subscribers.values())
        for matcher, handler in targets:
            if matcher(message):
                handler(message)

    def close(self) -> None:
        with self._lock:
            self._closed = True
            self._subscribers.clear()
