"""Send, receive, and display orchestration.

The Peer facade enforces the security ordering end to end:

  send    : derive per-message key -> encrypt with bound associated data
            -> envelope MAC -> persist ciphertext record -> transmit
  receive : resolve conversation -> replay check -> verify envelope MAC
            -> only then decrypt -> persist ciphertext record -> notify
  display : decrypt on demand, in memory only; nothing is written back

Every inbound envelope's stage sequence is recorded in an instrumented
stage log so the verify-before-decrypt ordering is checkable, not assumed.
Notifications are content-free: they carry the conversation id and a
timestamp, never message content or the sender's display name.

Clock and randomness sources are injectable so the adversarial harness can
run scenarios deterministically.
"""

from __future__ import annotations

import logging
import secrets
import threading
import uuid
from collections import Counter
from dataclasses import dataclass, replace
from enum import Enum
from typing import Callable, Dict, Optional

from . import crypto, envelope as wire
from .crypto import SymmetricKey, secure_wipe
from .envelope import Endpoint, Envelope, MsgType
from .errors import (
    AuthenticationError,
    DuplicateError,
    EmberError,
    MalformedInputError,
    NotFoundError,
    PreconditionError,
    RotationProtocolError,
    UndecryptableHistoryError,
)
from .events import EventBus
from .keystore import KeyStore
from .rotation import RotationFsm, RotationPayload, RotationPhase, now_ms
from .store import Contact, ConversationMeta, Direction, MessageRecord, Store
from .transport import DeliveryResult

logger = logging.getLogger(__name__)


class NotificationKind(Enum):
    MESSAGE_RECEIVED = "MESSAGE_RECEIVED"
    ROTATION_STATE = "ROTATION_STATE"
    CONNECTION_STATE = "CONNECTION_STATE"


@dataclass(frozen=True)
class NotificationEvent:
    """Content-free notification: no message body, and no sender name on
    MESSAGE_RECEIVED."""

    conversation_id: str
    kind: NotificationKind
    at: int
    detail: Optional[str] = None


class RejectReason(Enum):
    UNKNOWN_CONVERSATION = "unknown-conversation"
    REPLAY = "replay"
    AUTH_FAILURE = "auth-failure"
    UNKNOWN_KEY_VERSION = "unknown-key-version"
    DECRYPT_FAILURE = "decrypt-failure"


@dataclass(frozen=True)
class Rejection:
    reason: RejectReason
    detail: str = ""


# Stage labels recorded per inbound envelope (keyed by nonce hex).
STAGE_RESOLVE = "resolve"
STAGE_REPLAY_CHECK = "replay-check"
STAGE_HMAC_OK = "hmac-verify-ok"
STAGE_HMAC_FAIL = "hmac-verify-fail"
STAGE_DECRYPT_OK = "decrypt-ok"
STAGE_DECRYPT_FAIL = "decrypt-fail"
STAGE_PERSIST = "persist"
STAGE_ROUTE_ROTATION = "route-rotation"
STAGE_NOTIFY = "notify"


class StageLog:
    """Ordered record of pipeline stages per envelope, for tests and the
    adversarial harness."""

    def __init__(self):
        self._lock = threading.Lock()
        self.entries: list[tuple[int, str, str]] = []  # (seq, envelope ref, stage)
        self._seq = 0

    def record(self, ref: str, stage: str) -> None:
        with self._lock:
            self.entries.append((self._seq, ref, stage))
            self._seq += 1

    def stages_for(self, ref: str) -> list[str]:
        with self._lock:
            return [stage for _, r, stage in self.entries if r == ref]

    def all_entries(self) -> list[tuple[int, str, str]]:
        with self._lock:
            return list(self.entries)


class ReplayCache:
    """Per-conversation set of observed nonces, each retained at least
    until its message's expiry so a cached envelope cannot be replayed
    inside its own retention window."""

    def __init__(self):
        self._seen: Dict[str, Dict[bytes, int]] = {}

    def seen(self, conversation_id: str, nonce: bytes) -> bool:
        return nonce in self._seen.get(conversation_id, {})

    def add(self, conversation_id: str, nonce: bytes, expires_at: int) -> None:
        self._seen.setdefault(conversation_id, {})[nonce] = expires_at

    def purge(self, now: int) -> int:
        removed = 0
        for per_conv in self._seen.values():
            for nonce in [n for n, exp in per_conv.items() if exp < now]:
                del per_conv[nonce]
                removed += 1
        return removed


SendFn = Callable[[Endpoint, Envelope], DeliveryResult]


class Peer:
    """Thread-safe facade over store, keystore, rotation, and transport.
    Operations on one conversation are serialized; different conversations
    proceed independently."""

    def __init__(
        self,
        *,
        store: Store,
        keystore: KeyStore,
        local_endpoint: Endpoint,
        display_name: str,
        sender: Optional[SendFn] = None,
        default_ttl_ms: int = 300_000,
        rotation_timeout_ms: int = 30_000,
        clock: Callable[[], int] = now_ms,
        rng: Callable[[int], bytes] = secrets.token_bytes,
    ):
        if not display_name:
            raise PreconditionError("display_name must be non-empty")
        self.store = store
        self.keystore = keystore
        self.local_endpoint = local_endpoint
        self.display_name = display_name
        self.default_ttl_ms = default_ttl_ms
        self.rotation_timeout_ms = rotation_timeout_ms
        self._sender: SendFn = sender or (lambda ep, env: DeliveryResult(False, 0, "no-transport"))
        self._clock = clock
        self._rng = rng
        self.events = EventBus()
        self.stage_log = StageLog()
        self.replay_cache = ReplayCache()
        self.rejection_counts: Counter = Counter()
        self._fsms: Dict[str, RotationFsm] = {}
        self._locks: Dict[str, threading.RLock] = {}
        self._meta_lock = threading.Lock()
        keystore.on_change = self._persist_key_state

    # --- wiring ------------------------------------------------------------

    def set_sender(self, sender: SendFn) -> None:
        self._sender = sender

    def _conv_lock(self, conversation_id: str) -> threading.RLock:
        with self._meta_lock:
            lock = self._locks.get(conversation_id)
            if lock is None:
                lock = threading.RLock()
                self._locks[conversation_id] = lock
            return lock

    def _persist_key_state(self, conversation_id: str) -> None:
        """Keystore change hook: keep ring and trust durable in the
        encrypted store (the only on-disk location for key material)."""
        try:
            self.store.put_keyring(self.keystore.ring(conversation_id))
            contact = self.store.get_contact(conversation_id)
            contact.trust = self.keystore.trust(conversation_id)
            self.store.put_contact(contact)
        except NotFoundError:
            pass  # contact row not written yet (mid add_contact)

    def _fsm(self, conversation_id: str) -> RotationFsm:
        fsm = self._fsms.get(conversation_id)
        if fsm is None:
            fsm = RotationFsm(
                conversation_id,
                self.keystore,
                timeout_ms=self.rotation_timeout_ms,
                clock=self._clock,
                rng=self._rng,
                on_phase=self._on_rotation_phase,
            )
            self._fsms[conversation_id] = fsm
        return fsm

    def _on_rotation_phase(self, conversation_id: str, phase: RotationPhase) -> None:
        self.events.publish(
            NotificationEvent(
                conversation_id, NotificationKind.ROTATION_STATE, self._clock(), phase.value
            )
        )

    def rotation_phase(self, conversation_id: str) -> RotationPhase:
        fsm = self._fsms.get(conversation_id)
        return fsm.phase if fsm is not None else RotationPhase.IDLE

    # --- contacts -----------------------------------------------------------

    def add_contact(self, display_name: str, endpoint: Endpoint, imported_key: SymmetricKey) -> Contact:
        """Create the conversation for a peer from out-of-band key
        material: derive the id from both endpoints, install the key at
        version 1, record TOFU state."""
        if endpoint == self.local_endpoint:
            raise PreconditionError("contact endpoint equals the local endpoint")
        for existing in self.store.get_contacts():
            if existing.endpoint == endpoint:
                raise DuplicateError(f"contact with endpoint {endpoint.canonical()} exists")
        conversation_id = wire.conversation_id(self.local_endpoint, endpoint)
        now = self._clock()
        contact = Contact(display_name, endpoint, conversation_id, now)
        self.store.put_contact(contact)
        self.keystore.install_key(conversation_id, imported_key, 1)
        contact.trust = self.keystore.trust(conversation_id)
        self.store.put_contact(contact)
        self.store.put_conversation_meta(
            ConversationMeta(conversation_id, now, self.default_ttl_ms)
        )
        return contact

    def fingerprint(self, conversation_id: str) -> str:
        return crypto.fingerprint(self.keystore.active_key(conversation_id))

    def mark_verified(self, conversation_id: str):
        return self.keystore.mark_verified(conversation_id)

    # --- send ----------------------------------------------------------------

    def _build_envelope(
        self,
        conversation_id: str,
        msg_type: MsgType,
        plaintext: bytes,
        ttl: int,
        timestamp: int,
        nonce: bytes,
        key_version: int,
        key: SymmetricKey,
    ) -> Envelope:
        aad = wire.aad_input(conversation_id, self.display_name, msg_type, timestamp)
        message_key = crypto.derive_message_key(key, nonce)
        ciphertext = crypto.aead_encrypt(message_key, nonce, plaintext, aad)
        env = Envelope(
            version=wire.PROTOCOL_VERSION,
            conversation_id=conversation_id,
            sender_name=self.display_name,
            timestamp=timestamp,
            ttl=ttl,
            msg_type=msg_type,
            key_version=key_version,
            nonce=nonce,
            ciphertext=ciphertext,
            hmac=b"\x00" * crypto.HMAC_LEN,
        )
        mac = crypto.hmac_sign(crypto.derive_hmac_key(key), wire.hmac_input(env))
        return replace(env, hmac=mac)

    def send_message(self, conversation_id: str, text: str, ttl_ms: Optional[int] = None) -> MessageRecord:
        """Encrypt, MAC, persist the ciphertext record, then transmit. The
        record is durable before any byte leaves the process; a delivery
        failure marks it failed rather than deleting it."""
        if not text:
            raise PreconditionError("plaintext must be non-empty")
        with self._conv_lock(conversation_id):
            meta = self.store.get_conversation_meta(conversation_id)
            contact = self.store.get_contact(conversation_id)
            ttl = self.default_ttl_ms if ttl_ms is None else ttl_ms
            if ttl <= 0:
                raise PreconditionError("ttl must be > 0")
            key_version = self.keystore.active_version(conversation_id)
            key = self.keystore.active_key(conversation_id)
            timestamp = self._clock()
            nonce = self._rng(crypto.NONCE_LEN)
            buf = bytearray(text.encode("utf-8"))
            env = self._build_envelope(
                conversation_id, MsgType.MESSAGE, bytes(buf), ttl, timestamp, nonce, key_version, key
            )
            secure_wipe(buf)
            record = MessageRecord(
                id=str(uuid.UUID(bytes=self._rng(16))),
                conversation_id=conversation_id,
                direction=Direction.SENT,
                sender_name=self.display_name,
                ciphertext=env.ciphertext,
                nonce=nonce,
                hmac=env.hmac,
                key_version=key_version,
                timestamp=timestamp,
                ttl=ttl,
                expires_at=timestamp + ttl,
                delivery_status="pending",
            )
            self.store.put_message(record)  # persisted before transmission
            self.replay_cache.add(conversation_id, nonce, record.expires_at)
            meta.last_activity = timestamp
            self.store.put_conversation_meta(meta)
            result = self._sender(contact.endpoint, env)
            record.delivery_status = "delivered" if result.delivered else "failed"
            self.store.put_message(record)
            return record

    # --- receive ---------------------------------------------------------------

    def receive_envelope(self, env: Envelope):
        """Process one structurally valid inbound envelope in the fixed
        order resolve -> replay check -> HMAC verify -> decrypt -> persist
        -> route/notify. Returns the persisted MessageRecord for user
        messages, None for accepted control traffic, or a Rejection."""
        with self._conv_lock(env.conversation_id):
            return self._receive_locked(env)

    def _reject(self, reason: RejectReason, detail: str = "") -> Rejection:
        self.rejection_counts[reason.value] += 1
        logger.info("rejected envelope: %s %s", reason.value, detail)
        return Rejection(reason, detail)

    def _receive_locked(self, env: Envelope):
        ref = env.nonce.hex()
        log = self.stage_log
        log.record(ref, STAGE_RESOLVE)
        if not self.keystore.has_conversation(env.conversation_id):
            return self._reject(RejectReason.UNKNOWN_CONVERSATION, env.conversation_id)

        log.record(ref, STAGE_REPLAY_CHECK)
        if self.replay_cache.seen(env.conversation_id, env.nonce):
            return self._reject(RejectReason.REPLAY)

        try:
            key = self.keystore.get_key(env.conversation_id, env.key_version)
        except NotFoundError:
            return self._reject(RejectReason.UNKNOWN_KEY_VERSION, f"version {env.key_version}")

        ok = crypto.hmac_verify(crypto.derive_hmac_key(key), wire.hmac_input(env), env.hmac)
        if not ok:
            log.record(ref, STAGE_HMAC_FAIL)
            return self._reject(RejectReason.AUTH_FAILURE)
        log.record(ref, STAGE_HMAC_OK)

        aad = wire.aad_input(env.conversation_id, env.sender_name, env.msg_type, env.timestamp)
        message_key = crypto.derive_message_key(key, env.nonce)
        try:
            plaintext = crypto.aead_decrypt(message_key, env.nonce, env.ciphertext, aad)
        except (AuthenticationError, MalformedInputError) as exc:
            log.record(ref, STAGE_DECRYPT_FAIL)
            return self._reject(RejectReason.DECRYPT_FAILURE, str(exc))
        log.record(ref, STAGE_DECRYPT_OK)

        self.replay_cache.add(env.conversation_id, env.nonce, env.timestamp + env.ttl)

        if env.msg_type is MsgType.MESSAGE:
            record = MessageRecord(
                id=str(uuid.UUID(bytes=self._rng(16))),
                conversation_id=env.conversation_id,
                direction=Direction.RECEIVED,
                sender_name=env.sender_name,
                ciphertext=env.ciphertext,
                nonce=env.nonce,
                hmac=env.hmac,
                key_version=env.key_version,
                timestamp=env.timestamp,
                ttl=env.ttl,
                expires_at=env.timestamp + env.ttl,
            )
            self.store.put_message(record)
            log.record(ref, STAGE_PERSIST)
            try:
                meta = self.store.get_conversation_meta(env.conversation_id)
                meta.last_activity = self._clock()
                self.store.put_conversation_meta(meta)
            except NotFoundError:
                pass
            buf = bytearray(plaintext)
            secure_wipe(buf)  # plaintext is re-derived on demand for display
            del plaintext
            log.record(ref, STAGE_NOTIFY)
            self.events.publish(
                NotificationEvent(
                    env.conversation_id, NotificationKind.MESSAGE_RECEIVED, self._clock()
                )
            )
            return record

        log.record(ref, STAGE_ROUTE_ROTATION)
        try:
            payload = RotationPayload.from_bytes(plaintext)
            self._route_rotation(env, payload)
        except RotationProtocolError as exc:
            # authenticated but out-of-phase/garbled control traffic is
            # ignored; fail-closed means the key state never moves on it
            logger.warning("ignored rotation message: %s", exc)
        return None

    # --- rotation ---------------------------------------------------------------

    def start_rotation(self, conversation_id: str) -> DeliveryResult:
        """Initiate the three-stage rotation. If the REQUEST cannot be
        delivered at all the FSM reverts to IDLE so the conversation is not
        locked out for the timeout window."""
        with self._conv_lock(conversation_id):
            contact = self.store.get_contact(conversation_id)
            fsm = self._fsm(conversation_id)
            payload = fsm.initiate()
            env = self._control_envelope(
                conversation_id, MsgType.ROTATION_REQUEST, payload,
                self.keystore.active_version(conversation_id),
            )
            result = self._sender(contact.endpoint, env)
            if not result.delivered:
                fsm.abandon()
            return result

    def _control_envelope(
        self, conversation_id: str, msg_type: MsgType, payload: RotationPayload, key_version: int
    ) -> Envelope:
        key = self.keystore.get_key(conversation_id, key_version)
        return self._build_envelope(
            conversation_id,
            msg_type,
            payload.to_bytes(),
            self.default_ttl_ms,
            self._clock(),
            self._rng(crypto.NONCE_LEN),
            key_version,
            key,
        )

    def _route_rotation(self, env: Envelope, payload: RotationPayload) -> None:
        conversation_id = env.conversation_id
        contact = self.store.get_contact(conversation_id)
        fsm = self._fsm(conversation_id)
        fsm.check_timeout()

        if env.msg_type is MsgType.ROTATION_REQUEST:
            if fsm.phase is RotationPhase.REQUEST_SENT:
                # simultaneous initiation: lower canonical endpoint wins
                if self.local_endpoint.canonical() < contact.endpoint.canonical():
                    logger.info("concurrent rotation: local request wins, ignoring peer's")
                    return
                logger.info("concurrent rotation: abandoning local request")
                fsm.abandon()
            old_version = self.keystore.active_version(conversation_id)
            confirm = fsm.handle_request(payload)
            out = self._control_envelope(
                conversation_id, MsgType.ROTATION_CONFIRM, confirm, old_version
            )
            self._sender(contact.endpoint, out)
        elif env.msg_type is MsgType.ROTATION_CONFIRM:
            old_version = self.keystore.active_version(conversation_id)
            activate = fsm.handle_confirm(payload)
            if activate is not None:
                # ACTIVATE travels under the old key version, which stays
                # retained; the responder has not switched yet
                out = self._control_envelope(
                    conversation_id, MsgType.ROTATION_ACTIVATE, activate, old_version
                )
                self._sender(contact.endpoint, out)
        elif env.msg_type is MsgType.ROTATION_ACTIVATE:
            fsm.handle_activate(payload)

    # --- display -----------------------------------------------------------------

    def decrypt_for_display(self, record: MessageRecord) -> str:
        """On-demand, memory-only decryption of a persisted record. Raises
        UndecryptableHistoryError when the key version has been evicted and
        AuthenticationError when the stored bytes fail to verify (store
        corruption)."""
        try:
            key = self.keystore.get_key(record.conversation_id, record.key_version)
        except NotFoundError:
            raise UndecryptableHistoryError(
                f"key version {record.key_version} no longer retained"
            ) from None
        aad = wire.aad_input(
            record.conversation_id, record.sender_name, MsgType.MESSAGE, record.timestamp
        )
        message_key = crypto.derive_message_key(key, record.nonce)
        plaintext = crypto.aead_decrypt(message_key, record.nonce, record.ciphertext, aad)
        return plaintext.decode("utf-8")

    def decrypt_message(self, message_id: str) -> str:
        """Display path addressed by record id; a swept id is not-found."""
        return self.decrypt_for_display(self.store.get_message(message_id))

    # --- maintenance -------------------------------------------------------------

    def sweep_expired(self, now: Optional[int] = None) -> int:
        now = self._clock() if now is None else now
        removed = self.store.sweep_expired(now)
        self.replay_cache.purge(now)
        for fsm in self._fsms.values():
            fsm.check_timeout(now)
        return removed


class SweepScheduler:
    """Periodic TTL sweep driver (the daemon's background cleanup task)."""

    def __init__(self, peer: Peer, interval_ms: int):
        if interval_ms <= 0:
            raise PreconditionError("sweep interval must be > 0")
        self._peer = peer
        self._interval = interval_ms / 1000
        self._stop = threading.Event()
        self._thread: Optional[threading.Thread] = None

    def start(self) -> None:
        if self._thread is not None:
            return
        self._stop.clear()
        self._thread = threading.Thread(target=self._run, name="ember-sweeper", daemon=True)
        self._thread.start()

    def _run(self) -> None:
        while not self._stop.wait(self._interval):
            try:
                self._peer.sweep_expired()
            except EmberError:
                logger.exception("sweep failed")

    def stop(self) -> None:
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=5)
            self._thread = None
