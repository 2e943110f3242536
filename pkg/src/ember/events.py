"""Small thread-safe pub/sub used for connection-state and notification
streams. Every subscriber observes every event in publish order."""

from __future__ import annotations

import queue
import threading
from typing import Any, Optional


class Subscription:
    def __init__(self, bus: "EventBus"):
        self._bus = bus
        self._queue: "queue.Queue[Any]" = queue.Queue()

    def get(self, timeout: Optional[float] = None) -> Any:
        """Next event, blocking up to ``timeout``; raises queue.Empty."""
        return self._queue.get(timeout=timeout) if timeout is not None else self._queue.get()

    def drain(self) -> list:
        """All events delivered so far, without blocking."""
        items = []
        while True:
            try:
                items.append(self._queue.get_nowait())
            except queue.Empty:
                return items

    def close(self) -> None:
        self._bus.unsubscribe(self)


class EventBus:
    def __init__(self):
        self._lock = threading.Lock()
        self._subs: list[Subscription] = []

    def subscribe(self) -> Subscription:
        sub = Subscription(self)
        with self._lock:
            self._subs.append(sub)
        return sub

    def unsubscribe(self, sub: Subscription) -> None:
        with self._lock:
            if sub in self._subs:
                self._subs.remove(sub)

    def publish(self, event: Any) -> None:
        with self._lock:
            subs = list(self._subs)
        for sub in subs:
            sub._queue.put(event)
