"""TCP transport: one connection per outbound send with bounded
exponential-backoff retry, and a sequential inbound listener.

The listener accepts one connection at a time and processes envelopes in
order; malformed or oversized input closes that connection and is counted,
without disturbing the listener. Per-connection memory is bounded by the
envelope cap regardless of attacker-declared frame lengths (the bound is
enforced in deframe, before allocation). Connection state transitions are
published on an ordered event stream.
"""

from __future__ import annotations

import logging
import socket
import threading
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from .envelope import (
    DEFAULT_MAX_ENVELOPE_BYTES,
    Endpoint,
    Envelope,
    decode_envelope,
    deframe,
    encode_envelope,
    frame,
)
from .errors import MalformedInputError, OversizeError, TransportError
from .events import EventBus

logger = logging.getLogger(__name__)

DEFAULT_BACKLOG = 16


class ConnState(Enum):
    DISCONNECTED = "DISCONNECTED"
    LISTENING = "LISTENING"
    CONNECTED = "CONNECTED"
    ERROR = "ERROR"


@dataclass(frozen=True)
class ConnectionState:
    value: ConnState
    detail: Optional[str] = None


@dataclass(frozen=True)
class RetryPolicy:
    connect_timeout_ms: int = 5_000
    read_timeout_ms: int = 10_000
    write_timeout_ms: int = 10_000
    max_attempts: int = 3
    base_backoff_ms: int = 500  # doubles per attempt

    def backoff_ms(self, attempt: int) -> int:
        return self.base_backoff_ms * (2 ** (attempt - 1))


@dataclass(frozen=True)
class DeliveryResult:
    delivered: bool
    attempts: int
    error: Optional[str] = None  # category of the last failure


def send_envelope(
    endpoint: Endpoint,
    env: Envelope,
    policy: RetryPolicy = RetryPolicy(),
    *,
    max_envelope_bytes: int = DEFAULT_MAX_ENVELOPE_BYTES,
    sleep: Callable[[float], None] = time.sleep,
) -> DeliveryResult:
    """Open a connection, write one framed envelope, close. Failed attempts
    retry after base * 2^(attempt-1) ms up to max_attempts; the result
    reports attempts used and the last failure category (connect-timeout,
    connect-failed, write-timeout, or network-error)."""
    if policy.max_attempts < 1:
        raise TransportError("max_attempts must be >= 1")
    data = frame(encode_envelope(env), max_envelope_bytes)
    error = None
    for attempt in range(1, policy.max_attempts + 1):
        stage = "connect"
        try:
            sock = socket.create_connection(
                (endpoint.address, endpoint.port), timeout=policy.connect_timeout_ms / 1000
            )
            try:
                stage = "write"
                sock.settimeout(policy.write_timeout_ms / 1000)
                sock.sendall(data)
            finally:
                sock.close()
            return DeliveryResult(True, attempt)
        except socket.timeout:
            error = f"{stage}-timeout"
        except ConnectionRefusedError:
            error = "connect-refused"
        except OSError as exc:
            error = "connect-failed" if stage == "connect" else "network-error"
            logger.debug("send attempt %d failed: %s", attempt, exc)
        if attempt < policy.max_attempts:
            sleep(policy.backoff_ms(attempt) / 1000)
    return DeliveryResult(False, policy.max_attempts, error)


class Listener:
    """Long-running inbound listener. Accepted connections are handled
    strictly one at a time (a small accept backlog queues the rest); each
    connection may carry multiple frames back-to-back. The handler is only
    ever invoked with a structurally valid, decoded envelope."""

    def __init__(
        self,
        port: int,
        handler: Callable[[Envelope], object],
        *,
        host: str = "::",
        max_envelope_bytes: int = DEFAULT_MAX_ENVELOPE_BYTES,
        read_timeout_ms: int = 10_000,
        backlog: int = DEFAULT_BACKLOG,
    ):
        self._port = port
        self._host = host
        self._handler = handler
        self._max_envelope_bytes = max_envelope_bytes
        self._read_timeout_ms = read_timeout_ms
        self._backlog = backlog
        self._sock: Optional[socket.socket] = None
        self._thread: Optional[threading.Thread] = None
        self._stop = threading.Event()
        self._started = False
        self.events = EventBus()
        self.state = ConnectionState(ConnState.DISCONNECTED)
        self.counters: dict[str, int] = {
            "accepted": 0,
            "envelopes": 0,
            "oversize": 0,
            "malformed": 0,
            "handler_errors": 0,
        }
        self._lock = threading.Lock()

    def _set_state(self, value: ConnState, detail: Optional[str] = None) -> None:
        self.state = ConnectionState(value, detail)
        self.events.publish(self.state)

    @property
    def port(self) -> int:
        """Bound port (resolves 0 to the OS-assigned port after start)."""
        return self._port

    def start(self) -> None:
        if self._started:
            return
        try:
            infos = socket.getaddrinfo(
                self._host, self._port, socket.AF_UNSPEC, socket.SOCK_STREAM,
                flags=socket.AI_PASSIVE,
            )
            family, socktype, proto, _, addr = infos[0]
            sock = socket.socket(family, socktype, proto)
            sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            sock.bind(addr)
            sock.listen(self._backlog)
        except OSError as exc:
            self._set_state(ConnState.ERROR, f"bind failed: {exc}")
            raise TransportError(f"cannot bind listener on {self._host}:{self._port}: {exc}")
        sock.settimeout(0.2)  # lets the accept loop observe stop()
        self._sock = sock
        self._port = sock.getsockname()[1]
        self._stop.clear()
        self._started = True
        self._set_state(ConnState.LISTENING, f"port {self._port}")
        self._thread = threading.Thread(target=self._accept_loop, name="ember-listener", daemon=True)
        self._thread.start()

    def stop(self) -> None:
        """Idempotent shutdown."""
        if not self._started:
            return
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        self._started = False
        self._set_state(ConnState.DISCONNECTED)

    def _accept_loop(self) -> None:
        assert self._sock is not None
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            with self._lock:
                self.counters["accepted"] += 1
            self._set_state(ConnState.CONNECTED, f"peer {peer[0]}")
            try:
                self._serve_connection(conn)
            finally:
                conn.close()
                if not self._stop.is_set():
                    self._set_state(ConnState.LISTENING, f"port {self._port}")

    def _serve_connection(self, conn: socket.socket) -> None:
        conn.settimeout(self._read_timeout_ms / 1000)
        stream = conn.makefile("rb")
        try:
            while not self._stop.is_set():
                try:
                    payload = deframe(stream, self._max_envelope_bytes)
                except OversizeError as exc:
                    with self._lock:
                        self.counters["oversize"] += 1
                    logger.warning("closing connection: %s", exc)
                    return
                except MalformedInputError as exc:
                    with self._lock:
                        self.counters["malformed"] += 1
                    logger.warning("closing connection: %s", exc)
                    return
                except (socket.timeout, OSError):
                    return
                if payload is None:
                    return  # clean end of stream
                try:
                    env = decode_envelope(payload)
                except MalformedInputError as exc:
                    with self._lock:
                        self.counters["malformed"] += 1
                    logger.warning("closing connection: %s", exc)
                    return
                with self._lock:
                    self.counters["envelopes"] += 1
                try:
                    self._handler(env)
                except Exception:
                    # the handler owns its failures; the listener survives
                    with self._lock:
                        self.counters["handler_errors"] += 1
                    logger.exception("envelope handler raised")
        finally:
            stream.close()
