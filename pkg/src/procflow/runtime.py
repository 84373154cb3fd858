"""Composition root wiring bus, engine, gateway, callback registry, and the
outgoing transport into one runnable engine."""

from __future__ import annotations

from typing import Optional

from .bus import Bus
from .engine import Engine, EngineConfig
from .gateway import DatastreamGateway
from .persistence import PersistenceAdapter
from .protocol import HttpTransport, Transport


class EngineRuntime:
    def __init__(self, config: Optional[EngineConfig] = None,
                 persistence: Optional[PersistenceAdapter] = None,
                 transport: Optional[Transport] = None,
                 server_root: str = ""):
        self.config = config or EngineConfig()
        self.server_root = (server_root or
                            self.config.base_url.rsplit("/instances", 1)[0])
        self.bus = Bus()
        self.engine = Engine(config=self.config, persistence=persistence,
                             bus=self.bus)
        self.gateway = DatastreamGateway(
            self.bus, base_url=self.server_root,
            vote_timeout=self.config.vote_timeout,
            vote_callback_ceiling=self.config.vote_callback_ceiling,
            push_timeout=self.config.push_timeout,
            push_retries=self.config.push_retries,
            queue_bound=self.config.queue_bound)
        self.engine.shaper = self.gateway
        self.engine.transport = transport or HttpTransport()

    def shutdown(self) -> None:
        self.bus.close()
