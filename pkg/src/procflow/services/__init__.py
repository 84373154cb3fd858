"""Reference external functionalities: worklist, event-log writer, timeout,
and sub-process spawner."""

from .logger import XesLogWriter, attach_logger
from .worklist import Worklist, WorklistConfig, WorklistTask

__all__ = ["Worklist", "WorklistConfig", "WorklistTask",
           "XesLogWriter", "attach_logger"]
