"""Instance snapshot persistence.

One JSON document per instance.  The engine saves a snapshot after every
mutation; on startup every instance found in a resumable state (ready or
stopped, including their suspended callback records) is restored exactly.
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Any, Optional


class PersistenceError(Exception):
    pass


class PersistenceAdapter:
    """Interface: store/load instance snapshots keyed by instance id."""

    def save(self, instance_id: int, snapshot: dict[str, Any]) -> None:
        raise NotImplementedError

    def delete(self, instance_id: int) -> None:
        raise NotImplementedError

    def load_all(self) -> dict[int, dict[str, Any]]:
        raise NotImplementedError


class MemoryPersistence(PersistenceAdapter):
    """Default adapter: keeps snapshots in memory (desk-scale, no files)."""

    def __init__(self) -> None:
        self._store: dict[int, str] = {}
        self._lock = threading.Lock()

    def save(self, instance_id: int, snapshot: dict[str, Any]) -> None:
        with self._lock:
            self._store[instance_id] = json.dumps(snapshot, sort_keys=True)

    def delete(self, instance_id: int) -> None:
        with self._lock:
            self._store.pop(instance_id, None)

    def load_all(self) -> dict[int, dict[str, Any]]:
        with self._lock:
            return {iid: json.loads(doc) for iid, doc in self._store.items()}


class FilePersistence(PersistenceAdapter):
    """One `<id>.json` per instance under a directory; atomic replace writes."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, instance_id: int) -> Path:
        return self.directory / f"{instance_id}.json"

    def save(self, instance_id: int, snapshot: dict[str, Any]) -> None:
        tmp = self._path(instance_id).with_suffix(".tmp")
        try:
            tmp.write_text(json.dumps(snapshot, sort_keys=True, indent=1))
            os.replace(tmp, self._path(instance_id))
        except OSError as exc:
            raise PersistenceError(str(exc)) from exc

    def delete(self, instance_id: int) -> None:
        try:
            self._path(instance_id).unlink(missing_ok=True)
        except OSError as exc:
            raise PersistenceError(str(exc)) from exc

    def load_all(self) -> dict[int, dict[str, Any]]:
        out: dict[int, dict[str, Any]] = {}
        for path in sorted(self.directory.glob("*.json")):
            try:
                out[int(path.stem)] = json.loads(path.read_text())
            except (ValueError, OSError):
                continue
        return out
