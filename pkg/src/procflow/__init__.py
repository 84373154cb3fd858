"""procflow: a service-oriented process execution engine.

Tree-structured process models are executed by isolated per-instance
execution units; activity work is delegated to external HTTP services through
a header-extension protocol, and every execution aspect is streamed over a
topic-based publish/subscribe interface whose subscribers can shape execution
through votes.
"""

from .engine import Engine, EngineConfig, Instance
from .model import ProcessModel, parse_model, serialize_model
from .runtime import EngineRuntime

__all__ = [
    "Engine", "EngineConfig", "EngineRuntime", "Instance",
    "ProcessModel", "parse_model", "serialize_model",
]

__version__ = "0.1.0"
