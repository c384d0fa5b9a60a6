"""Notification sink: the stand-in for the cloud uplink.

Rules publish through ``engine.notify``; the sink keeps a bounded in-memory
ring (oldest dropped under pressure, drops counted), fans out to listeners
such as the SSE hub, and optionally appends JSON lines to a file from a
background thread so rule execution never blocks on disk.
"""

from __future__ import annotations

import json
import queue
import threading
from collections import deque
from dataclasses import asdict, dataclass
from typing import Callable


@dataclass(frozen=True, slots=True)
class Notification:
    rule: str
    level: str
    message: str
    at: float

    def to_json(self) -> dict:
        return asdict(self)


class NotificationSink:
    def __init__(self, *, capacity: int = 10_000, file_path: str | None = None):
        self._ring: deque[Notification] = deque()
        self._capacity = capacity
        self._dropped = 0
        self._lock = threading.Lock()
        self._listeners: list[Callable[[Notification], None]] = []
        self._file_queue: queue.Queue | None = None
        self._writer: threading.Thread | None = None
        if file_path:
            self._file_queue = queue.Queue(maxsize=capacity)
            self._writer = threading.Thread(target=self._drain_to_file,
                                            args=(file_path,), daemon=True)
            self._writer.start()

    def add_listener(self, listener: Callable[[Notification], None]) -> None:
        with self._lock:
            self._listeners.append(listener)

    def emit(self, rule: str, level: str, message: str, at: float) -> Notification:
        note = Notification(rule=rule, level=level, message=message, at=at)
        with self._lock:
            if len(self._ring) >= self._capacity:
                self._ring.popleft()
                self._dropped += 1
            self._ring.append(note)
            listeners = list(self._listeners)
        for listener in listeners:
            listener(note)
        if self._file_queue is not None:
            try:
                self._file_queue.put_nowait(note)
            except queue.Full:
                with self._lock:
                    self._dropped += 1
        return note

    def recent(self, limit: int = 100) -> list[Notification]:
        with self._lock:
            return list(self._ring)[-limit:]

    @property
    def dropped(self) -> int:
        with self._lock:
            return self._dropped

    def __len__(self) -> int:
        with self._lock:
            return len(self._ring)

    def _drain_to_file(self, path: str) -> None:
        with open(path, "a", encoding="utf-8") as fh:
            while True:
                note = self._file_queue.get()
                if note is None:
                    return
                fh.write(json.dumps(note.to_json(), sort_keys=True) + "\n")
                fh.flush()

    def close(self) -> None:
        if self._file_queue is not None:
            self._file_queue.put(None)
            if self._writer is not None:
                self._writer.join(timeout=2.0)
