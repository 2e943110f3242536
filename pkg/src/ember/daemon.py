"""Daemon composition root: identity material, encrypted store, pipeline,
TCP listener, TTL sweeper, and the loopback control server.

Identity directory layout:
    control.token  bearer token for the control API (0600)
    passphrase     auto-generated store passphrase unless EMBER_PASSPHRASE
                   is set (0600)
    store.embr     the encrypted store

Daemon logs never contain message plaintext: the logging layer installs a
filter that drops any record flagged with plaintext-bearing fields, and no
pipeline call site passes message bodies to a logger in the first place.
"""

from __future__ import annotations

import logging
import os
import secrets
import threading
from pathlib import Path
from typing import Optional

from .config import Config
from .envelope import Endpoint
from .errors import EmberError
from .events import EventBus
from .keystore import KeyStore
from .pipeline import NotificationEvent, NotificationKind, Peer, SweepScheduler
from .store import Store
from .transport import ConnectionState, Listener, send_envelope

logger = logging.getLogger(__name__)

SENSITIVE_LOG_FIELDS = ("plaintext", "message_body", "key_bytes")


class RedactionFilter(logging.Filter):
    """Refuses to emit records that carry plaintext or key material in
    their extra fields; last line of defense behind call-site discipline."""

    def filter(self, record: logging.LogRecord) -> bool:
        return not any(hasattr(record, name) for name in SENSITIVE_LOG_FIELDS)


def _write_private(path: Path, data: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    try:
        os.chmod(path, 0o600)
    except OSError:
        pass


class Daemon:
    """Owns all long-lived components. start() is idempotent-safe to pair
    with stop(); stop() may be called from any thread (including a control
    API handler)."""

    def __init__(self, config: Config):
        self.config = config
        self.store: Optional[Store] = None
        self.peer: Optional[Peer] = None
        self.listener: Optional[Listener] = None
        self.sweeper: Optional[SweepScheduler] = None
        self.control_events = EventBus()  # control-shaped dict events
        self.token: str = ""
        self._control_server = None
        self._control_thread: Optional[threading.Thread] = None
        self._bridge_thread: Optional[threading.Thread] = None
        self._bridge_stop = threading.Event()
        self._stopped = threading.Event()
        self._started = False

    # --- identity ----------------------------------------------------------

    def _load_identity(self) -> str:
        ident = self.config.identity_dir
        ident.mkdir(parents=True, exist_ok=True)
        try:
            os.chmod(ident, 0o700)
        except OSError:
            pass
        token_file = ident / "control.token"
        if not token_file.exists():
            _write_private(token_file, secrets.token_hex(32).encode("ascii"))
        self.token = token_file.read_text().strip()

        passphrase = os.environ.get("EMBER_PASSPHRASE")
        if passphrase:
            return passphrase
        pass_file = ident / "passphrase"
        if not pass_file.exists():
            _write_private(pass_file, secrets.token_hex(32).encode("ascii"))
        return pass_file.read_text().strip()

    # --- lifecycle -----------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        logging.getLogger("ember").addFilter(RedactionFilter())
        passphrase = self._load_identity()
        self.store = Store.open_with_passphrase(self.config.identity_dir / "store.embr", passphrase)

        keystore = KeyStore()
        for contact in self.store.get_contacts():
            try:
                ring = self.store.get_keyring(contact.conversation_id)
            except EmberError:
                continue
            keystore.load_ring(ring, contact.trust)

        policy = self.config.retry_policy()
        self.peer = Peer(
            store=self.store,
            keystore=keystore,
            local_endpoint=Endpoint(self.config.local_address, self.config.listen_port or 5896),
            display_name=self.config.display_name,
            sender=lambda endpoint, env: send_envelope(
                endpoint, env, policy, max_envelope_bytes=self.config.max_envelope_bytes
            ),
            default_ttl_ms=self.config.default_ttl_ms,
        )

        self.listener = Listener(
            self.config.listen_port,
            self.peer.receive_envelope,
            host="::" if ":" in self.config.local_address else "0.0.0.0",
            max_envelope_bytes=self.config.max_envelope_bytes,
            read_timeout_ms=self.config.read_timeout_ms,
        )
        self.listener.start()

        self.sweeper = SweepScheduler(self.peer, self.config.sweep_interval_ms)
        self.sweeper.start()

        self._bridge_stop.clear()
        self._bridge_thread = threading.Thread(target=self._bridge_events, daemon=True)
        self._bridge_thread.start()

        self._start_control_server()
        self._stopped.clear()
        self._started = True
        logger.info(
            "daemon up: listener port %d, control %s:%d",
            self.listener.port, self.config.control_host, self.config.control_port,
        )

    def stop(self) -> None:
        if not self._started:
            return
        self._started = False
        if self._control_server is not None:
            self._control_server.should_exit = True
        if self._control_thread is not None:
            self._control_thread.join(timeout=10)
            self._control_thread = None
            self._control_server = None
        if self.sweeper is not None:
            self.sweeper.stop()
        if self.listener is not None:
            self.listener.stop()
        self._bridge_stop.set()
        if self._bridge_thread is not None:
            self._bridge_thread.join(timeout=5)
            self._bridge_thread = None
        if self.store is not None:
            self.store.close()
        self._stopped.set()
        logger.info("daemon stopped")

    def request_stop(self) -> None:
        """Asynchronous stop, callable from a control handler."""
        threading.Thread(target=self.stop, daemon=True).start()

    def wait(self, timeout: Optional[float] = None) -> bool:
        return self._stopped.wait(timeout)

    # --- event bridging ---------------------------------------------------------

    def _bridge_events(self) -> None:
        """Convert pipeline notifications and listener state transitions
        into control-API event dicts (content-free by construction)."""
        assert self.peer is not None and self.listener is not None
        peer_sub = self.peer.events.subscribe()
        listener_sub = self.listener.events.subscribe()
        import queue as _queue

        while not self._bridge_stop.is_set():
            for sub, convert in ((peer_sub, self._convert_notification),
                                 (listener_sub, self._convert_state)):
                try:
                    event = sub.get(timeout=0.1)
                except _queue.Empty:
                    continue
                self.control_events.publish(convert(event))

    def _convert_notification(self, event: NotificationEvent) -> dict:
        if event.kind is NotificationKind.MESSAGE_RECEIVED:
            return {
                "event": "messageReceived",
                "data": {"conversationId": event.conversation_id, "at": event.at},
            }
        if event.kind is NotificationKind.ROTATION_STATE:
            data = {"conversationId": event.conversation_id, "at": event.at, "phase": event.detail}
            if self.peer is not None:
                try:
                    data["activeKeyVersion"] = self.peer.keystore.active_version(
                        event.conversation_id
                    )
                except EmberError:
                    pass
            return {"event": "rotationState", "data": data}
        return {
            "event": "connectionState",
            "data": {"conversationId": event.conversation_id, "at": event.at, "detail": event.detail},
        }

    def _convert_state(self, state: ConnectionState) -> dict:
        return {
            "event": "connectionState",
            "data": {"state": state.value.value, "detail": state.detail},
        }

    # --- control server -----------------------------------------------------------

    def _start_control_server(self) -> None:
        import uvicorn

        from .control import create_app

        app = create_app(self)
        config = uvicorn.Config(
            app,
            host=self.config.control_host,
            port=self.config.control_port,
            log_level="warning",
            lifespan="off",
        )
        self._control_server = uvicorn.Server(config)
        self._control_thread = threading.Thread(
            target=self._control_server.run, name="ember-control", daemon=True
        )
        self._control_thread.start()
        import time as _time

        deadline = _time.monotonic() + 10
        while not self._control_server.started and _time.monotonic() < deadline:
            if not self._control_thread.is_alive():
                raise EmberError("control server failed to start")
            _time.sleep(0.02)

    @property
    def control_port(self) -> int:
        if self._control_server is not None and self._control_server.servers:
            socks = self._control_server.servers[0].sockets
            if socks:
                return socks[0].getsockname()[1]
        return self.config.control_port
