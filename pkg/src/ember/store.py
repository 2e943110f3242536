"""Encrypted-at-rest, ciphertext-only persistence.

File layout (format version 1):

    header  = magic ``EMBR`` || 4-byte BE format version || 16-byte salt
    records = repeated [4-byte BE length || nonce(12) || AEAD(ciphertext+tag)]

Every record is an AEAD-sealed JSON operation (`put`/`delete` of a contact,
conversation, message, or keyring row) with the file header as associated
data, so records cannot be transplanted between store files. The first
record is a fixed probe that detects a wrong master key on open without
touching user data. Records are applied log-style into memory on open;
appends are flushed and fsynced before returning, and a torn tail left by a
crash is detected and dropped (the completed records before it survive).

Message rows hold ciphertext produced upstream by the pipeline; no code
path here ever sees plaintext message content, so no byte of it can reach
disk. The schema is migrated forward only; a file written by a newer format
version is refused untouched.
"""

from __future__ import annotations

import base64
import json
import logging
import os
import struct
import threading
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional

from . import crypto
from .crypto import KeyRole, SymmetricKey
from .envelope import Endpoint
from .errors import (
    CorruptStoreError,
    NotFoundError,
    PreconditionError,
    SchemaVersionError,
    StoreClosedError,
    StructuralError,
    WrongMasterKeyError,
)
from .keystore import TrustState, TrustStatus, VersionedKeyRing

logger = logging.getLogger(__name__)

MAGIC = b"EMBR"
FORMAT_VERSION = 1
SALT_LEN = 16
HEADER_LEN = len(MAGIC) + 4 + SALT_LEN
DEFAULT_TTL_MS = 300_000

MASTER_KEY_INFO = b"ember:v1:storekey"
_CHECK_PROBE = "ember-store-check"


class Direction(Enum):
    SENT = "SENT"
    RECEIVED = "RECEIVED"


@dataclass
class Contact:
    display_name: str
    endpoint: Endpoint
    conversation_id: str
    created_at: int
    trust: Optional[TrustState] = None


@dataclass
class ConversationMeta:
    conversation_id: str
    last_activity: int
    default_ttl: int = DEFAULT_TTL_MS

    def __post_init__(self):
        if self.default_ttl <= 0:
            raise PreconditionError("default_ttl must be > 0")


@dataclass
class MessageRecord:
    """Persisted message row. Holds ciphertext and metadata only; the type
    deliberately has no plaintext field of any kind."""

    id: str
    conversation_id: str
    direction: Direction
    sender_name: str
    ciphertext: bytes
    nonce: bytes
    hmac: bytes
    key_version: int
    timestamp: int
    ttl: int
    expires_at: int
    delivery_status: str = "delivered"  # sent records: pending | delivered | failed

    def __post_init__(self):
        if self.ttl <= 0:
            raise PreconditionError("ttl must be > 0")
        if self.expires_at != self.timestamp + self.ttl:
            raise PreconditionError("expires_at must equal timestamp + ttl")


def derive_master_key(passphrase: str | bytes, salt: bytes) -> SymmetricKey:
    """Master storage key from a passphrase and the store's random salt
    (stands in for a platform keystore)."""
    if isinstance(passphrase, str):
        passphrase = passphrase.encode("utf-8")
    if len(salt) != SALT_LEN:
        raise PreconditionError(f"salt must be {SALT_LEN} bytes")
    okm = crypto.hkdf_expand(crypto.hkdf_extract(salt, passphrase), MASTER_KEY_INFO, crypto.KEY_LEN)
    return SymmetricKey(okm, KeyRole.STORAGE)


def read_salt(path: str | Path) -> bytes:
    """Salt from an existing store file header."""
    with open(path, "rb") as fh:
        header = fh.read(HEADER_LEN)
    if len(header) < HEADER_LEN or header[: len(MAGIC)] != MAGIC:
        raise StructuralError(f"{path} is not a store file")
    return header[len(MAGIC) + 4 :]


# --- record (de)serialization -------------------------------------------

def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"))


def _message_to_obj(rec: MessageRecord) -> dict:
    return {
        "id": rec.id,
        "conversationId": rec.conversation_id,
        "direction": rec.direction.value,
        "senderName": rec.sender_name,
        "ciphertext": _b64(rec.ciphertext),
        "nonce": _b64(rec.nonce),
        "hmac": _b64(rec.hmac),
        "keyVersion": rec.key_version,
        "timestamp": rec.timestamp,
        "ttl": rec.ttl,
        "expiresAt": rec.expires_at,
        "deliveryStatus": rec.delivery_status,
    }


def _message_from_obj(obj: dict) -> MessageRecord:
    return MessageRecord(
        id=obj["id"],
        conversation_id=obj["conversationId"],
        direction=Direction(obj["direction"]),
        sender_name=obj["senderName"],
        ciphertext=_unb64(obj["ciphertext"]),
        nonce=_unb64(obj["nonce"]),
        hmac=_unb64(obj["hmac"]),
        key_version=obj["keyVersion"],
        timestamp=obj["timestamp"],
        ttl=obj["ttl"],
        expires_at=obj["expiresAt"],
        delivery_status=obj.get("deliveryStatus", "delivered"),
    )


def _trust_to_obj(trust: TrustState) -> dict:
    return {
        "firstSeen": trust.first_seen_fingerprint,
        "current": trust.current_fingerprint,
        "status": trust.status.value,
        "baseStatus": trust.base_status.value,
    }


def _trust_from_obj(conversation_id: str, obj: dict) -> TrustState:
    return TrustState(
        conversation_id=conversation_id,
        first_seen_fingerprint=obj["firstSeen"],
        current_fingerprint=obj["current"],
        status=TrustStatus(obj["status"]),
        base_status=TrustStatus(obj.get("baseStatus", obj["status"])),
    )


def _contact_to_obj(contact: Contact) -> dict:
    return {
        "displayName": contact.display_name,
        "address": contact.endpoint.address,
        "port": contact.endpoint.port,
        "conversationId": contact.conversation_id,
        "createdAt": contact.created_at,
        "trust": _trust_to_obj(contact.trust) if contact.trust else None,
    }


def _contact_from_obj(obj: dict) -> Contact:
    conv = obj["conversationId"]
    trust = _trust_from_obj(conv, obj["trust"]) if obj.get("trust") else None
    return Contact(
        display_name=obj["displayName"],
        endpoint=Endpoint(obj["address"], obj["port"]),
        conversation_id=conv,
        created_at=obj["createdAt"],
        trust=trust,
    )


def _ring_to_obj(ring: VersionedKeyRing) -> dict:
    for key in ring.entries.values():
        if key.role not in crypto.PERSISTABLE_ROLES:
            raise PreconditionError(f"refusing to persist a {key.role.value} key")
    return {
        "conversationId": ring.conversation_id,
        "activeVersion": ring.active_version,
        "maxRetained": ring.max_retained,
        "entries": {str(v): _b64(k.raw) for v, k in ring.entries.items()},
    }


def _ring_from_obj(obj: dict) -> VersionedKeyRing:
    entries = {
        int(version): SymmetricKey(_unb64(encoded), KeyRole.CONVERSATION)
        for version, encoded in obj["entries"].items()
    }
    return VersionedKeyRing(
        conversation_id=obj["conversationId"],
        entries=entries,
        active_version=obj["activeVersion"],
        max_retained=obj["maxRetained"],
    )


class Store:
    """Single-writer encrypted store. Mutations serialize on an internal
    lock; reads return copies of committed state."""

    def __init__(self, path: str | Path, master_key: SymmetricKey):
        self._path = Path(path)
        self._key = master_key
        self._lock = threading.RLock()
        self._closed = False
        self._needs_check = False
        self._messages: Dict[str, MessageRecord] = {}
        self._message_order: List[str] = []  # insertion order, for stable sorts
        self._contacts: Dict[str, Contact] = {}  # keyed by conversation id
        self._meta: Dict[str, ConversationMeta] = {}
        self._rings: Dict[str, dict] = {}  # stored as plain objects

        if self._path.exists() and self._path.stat().st_size > 0:
            self._load()
            self._fh = open(self._path, "r+b")
            self._fh.seek(0, os.SEEK_END)
            if self._good_end < self._fh.tell():
                # torn tail from a crash mid-append; drop it
                logger.warning("dropping torn tail at %d..%d", self._good_end, self._fh.tell())
                self._fh.truncate(self._good_end)
                self._fh.seek(0, os.SEEK_END)
            if self._needs_check:
                self._append({"kind": "check", "probe": _CHECK_PROBE})
        else:
            self._salt = os.urandom(SALT_LEN)
            self._header = MAGIC + struct.pack(">I", FORMAT_VERSION) + self._salt
            self._path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self._path, "w+b")
            try:
                os.chmod(self._path, 0o600)
            except OSError:
                pass
            self._fh.write(self._header)
            self._append({"kind": "check", "probe": _CHECK_PROBE})

    # --- lifecycle -------------------------------------------------------

    @classmethod
    def open(cls, path: str | Path, master_key: SymmetricKey) -> "Store":
        return cls(path, master_key)

    @classmethod
    def open_with_passphrase(cls, path: str | Path, passphrase: str | bytes) -> "Store":
        path = Path(path)
        if path.exists() and path.stat().st_size > 0:
            salt = read_salt(path)
        else:
            salt = os.urandom(SALT_LEN)
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(path, "wb") as fh:
                fh.write(MAGIC + struct.pack(">I", FORMAT_VERSION) + salt)
                fh.flush()
                os.fsync(fh.fileno())
            try:
                os.chmod(path, 0o600)
            except OSError:
                pass
        return cls(path, derive_master_key(passphrase, salt))

    def close(self) -> None:
        with self._lock:
            if self._closed:
                return
            self._fh.flush()
            os.fsync(self._fh.fileno())
            self._fh.close()
            self._closed = True

    @property
    def path(self) -> Path:
        return self._path

    @property
    def salt(self) -> bytes:
        return self._salt

    # --- log machinery ---------------------------------------------------

    def _seal(self, obj: dict) -> bytes:
        plaintext = json.dumps(obj, separators=(",", ":")).encode("utf-8")
        nonce = crypto.generate_nonce()
        blob = nonce + crypto.aead_encrypt(self._key, nonce, plaintext, self._header)
        return struct.pack(">I", len(blob)) + blob

    def _append(self, obj: dict) -> None:
        if self._closed:
            raise StoreClosedError("store is closed")
        data = self._seal(obj)
        self._fh.write(data)
        self._fh.flush()
        os.fsync(self._fh.fileno())
        self._good_end = self._fh.tell()

    def _load(self) -> None:
        with open(self._path, "rb") as fh:
            header = fh.read(HEADER_LEN)
            if len(header) < HEADER_LEN or header[: len(MAGIC)] != MAGIC:
                raise StructuralError(f"{self._path} is not a store file")
            (version,) = struct.unpack(">I", header[len(MAGIC) : len(MAGIC) + 4])
            if version > FORMAT_VERSION:
                raise SchemaVersionError(
                    f"store format {version} is newer than supported {FORMAT_VERSION}; refusing"
                )
            # forward-only migrations would run here; format 1 is current
            self._salt = header[len(MAGIC) + 4 :]
            self._header = header
            offset = HEADER_LEN
            records: List[dict] = []
            data = fh.read()
            good_end = offset
            pos = 0
            while pos < len(data):
                if pos + 4 > len(data):
                    break  # torn length prefix
                (length,) = struct.unpack(">I", data[pos : pos + 4])
                if pos + 4 + length > len(data):
                    break  # torn payload
                blob = data[pos + 4 : pos + 4 + length]
                nonce, sealed = blob[: crypto.NONCE_LEN], blob[crypto.NONCE_LEN :]
                try:
                    plaintext = crypto.aead_decrypt(self._key, nonce, sealed, self._header)
                except Exception:
                    if not records:
                        raise WrongMasterKeyError(
                            "store check record failed to authenticate"
                        ) from None
                    if pos + 4 + length == len(data):
                        break  # unreadable final record: treat as torn tail
                    raise CorruptStoreError(
                        f"record at offset {offset + pos} failed to authenticate"
                    ) from None
                records.append(json.loads(plaintext.decode("utf-8")))
                pos += 4 + length
                good_end = offset + pos
            self._good_end = good_end
        if not records:
            # header-only file (fresh passphrase bootstrap, or a torn very
            # first append): nothing to verify the key against, no data lost
            self._needs_check = True
            return
        if records[0].get("kind") != "check" or records[0].get("probe") != _CHECK_PROBE:
            raise CorruptStoreError("store check record missing")
        for obj in records[1:]:
            self._apply(obj)

    def _apply(self, obj: dict) -> None:
        kind, op = obj.get("kind"), obj.get("op")
        if kind == "message":
            if op == "put":
                rec = _message_from_obj(obj["value"])
                if rec.id not in self._messages:
                    self._message_order.append(rec.id)
                self._messages[rec.id] = rec
            elif op == "delete":
                self._messages.pop(obj["key"], None)
        elif kind == "contact":
            if op == "put":
                contact = _contact_from_obj(obj["value"])
                self._contacts[contact.conversation_id] = contact
        elif kind == "meta":
            if op == "put":
                value = obj["value"]
                self._meta[value["conversationId"]] = ConversationMeta(
                    value["conversationId"], value["lastActivity"], value["defaultTtl"]
                )
        elif kind == "keyring":
            if op == "put":
                self._rings[obj["value"]["conversationId"]] = obj["value"]
        else:
            logger.debug("ignoring unknown record kind %r", kind)

    def _put(self, kind: str, value: dict) -> None:
        obj = {"kind": kind, "op": "put", "value": value}
        self._append(obj)
        self._apply(obj)

    def _delete(self, kind: str, key: str) -> None:
        obj = {"kind": kind, "op": "delete", "key": key}
        self._append(obj)
        self._apply(obj)

    def _check_open(self) -> None:
        if self._closed:
            raise StoreClosedError("store is closed")

    # --- messages ---------------------------------------------------------

    def put_message(self, rec: MessageRecord) -> None:
        with self._lock:
            self._check_open()
            self._put("message", _message_to_obj(rec))

    def get_message(self, message_id: str) -> MessageRecord:
        with self._lock:
            self._check_open()
            rec = self._messages.get(message_id)
            if rec is None:
                raise NotFoundError(f"no message {message_id}")
            return replace(rec)

    def query_messages(self, conversation_id: str, limit: Optional[int] = None) -> List[MessageRecord]:
        """Newest first; ties broken by insertion order (latest first)."""
        with self._lock:
            self._check_open()
            order = {mid: i for i, mid in enumerate(self._message_order)}
            rows = [r for r in self._messages.values() if r.conversation_id == conversation_id]
            rows.sort(key=lambda r: (r.timestamp, order.get(r.id, 0)), reverse=True)
            if limit is not None:
                rows = rows[:limit]
            return [replace(r) for r in rows]

    def delete_message(self, message_id: str) -> None:
        with self._lock:
            self._check_open()
            if message_id in self._messages:
                self._delete("message", message_id)

    def sweep_expired(self, now: int) -> int:
        """Remove every record with expires_at strictly before ``now``.
        Idempotent; returns the number removed."""
        with self._lock:
            self._check_open()
            expired = [r.id for r in self._messages.values() if r.expires_at < now]
            for mid in expired:
                self._delete("message", mid)
            return len(expired)

    # --- contacts / conversations / keyrings ------------------------------

    def put_contact(self, contact: Contact) -> None:
        with self._lock:
            self._check_open()
            self._put("contact", _contact_to_obj(contact))

    def get_contacts(self) -> List[Contact]:
        with self._lock:
            self._check_open()
            return [_contact_from_obj(_contact_to_obj(c)) for c in self._contacts.values()]

    def get_contact(self, conversation_id: str) -> Contact:
        with self._lock:
            self._check_open()
            contact = self._contacts.get(conversation_id)
            if contact is None:
                raise NotFoundError(f"no contact for conversation {conversation_id}")
            return _contact_from_obj(_contact_to_obj(contact))

    def put_conversation_meta(self, meta: ConversationMeta) -> None:
        with self._lock:
            self._check_open()
            self._put(
                "meta",
                {
                    "conversationId": meta.conversation_id,
                    "lastActivity": meta.last_activity,
                    "defaultTtl": meta.default_ttl,
                },
            )

    def get_conversation_meta(self, conversation_id: str) -> ConversationMeta:
        with self._lock:
            self._check_open()
            meta = self._meta.get(conversation_id)
            if meta is None:
                raise NotFoundError(f"no conversation {conversation_id}")
            return ConversationMeta(meta.conversation_id, meta.last_activity, meta.default_ttl)

    def list_conversation_ids(self) -> List[str]:
        with self._lock:
            self._check_open()
            return sorted(self._meta)

    def put_keyring(self, ring: VersionedKeyRing) -> None:
        with self._lock:
            self._check_open()
            self._put("keyring", _ring_to_obj(ring))

    def get_keyring(self, conversation_id: str) -> VersionedKeyRing:
        with self._lock:
            self._check_open()
            obj = self._rings.get(conversation_id)
            if obj is None:
                raise NotFoundError(f"no keyring for conversation {conversation_id}")
            return _ring_from_obj(obj)
