"""Wire representation: JSON envelopes inside length-prefixed frames,
canonical byte strings for authentication, endpoint validation, and
deterministic conversation identifiers.

Wire format (stable within protocol version 1):
  frame    = 4-byte big-endian payload length || payload
  payload  = UTF-8 JSON object with keys
             version, conversationId, senderName, timestamp, ttl, type,
             keyVersion, nonce, ciphertext, hmac
  binary fields are standard Base64 with padding.

Authentication inputs never use the JSON serialization (JSON is not
canonical across implementations); they use unambiguous length-prefixed
concatenation instead.
"""

from __future__ import annotations

import base64
import binascii
import hashlib
import ipaddress
import json
import re
import struct
from dataclasses import dataclass
from enum import Enum
from typing import Optional

from .errors import (
    OversizeError,
    ParseError,
    PreconditionError,
    StructuralError,
    TruncationError,
    UnsupportedVersionError,
)

PROTOCOL_VERSION = 1
DEFAULT_MAX_ENVELOPE_BYTES = 65_536
MAX_SENDER_NAME_BYTES = 256
FRAME_HEADER_LEN = 4
NONCE_LEN = 12
HMAC_LEN = 32

_CONVERSATION_ID_RE = re.compile(
    r"^[0-9a-f]{8}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{4}-[0-9a-f]{12}$"
)


class MsgType(Enum):
    MESSAGE = "MESSAGE"
    ROTATION_REQUEST = "ROTATION_REQUEST"
    ROTATION_CONFIRM = "ROTATION_CONFIRM"
    ROTATION_ACTIVATE = "ROTATION_ACTIVATE"


ROTATION_TYPES = frozenset(
    {MsgType.ROTATION_REQUEST, MsgType.ROTATION_CONFIRM, MsgType.ROTATION_ACTIVATE}
)

WIRE_KEYS = (
    "version",
    "conversationId",
    "senderName",
    "timestamp",
    "ttl",
    "type",
    "keyVersion",
    "nonce",
    "ciphertext",
    "hmac",
)


def _is_int(value) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


@dataclass(frozen=True)
class Envelope:
    """The authenticated wire unit. Never carries plaintext content."""

    version: int
    conversation_id: str
    sender_name: str
    timestamp: int
    ttl: int
    msg_type: MsgType
    key_version: int
    nonce: bytes
    ciphertext: bytes
    hmac: bytes

    def validate(self) -> None:
        if self.version != PROTOCOL_VERSION:
            raise UnsupportedVersionError(f"protocol version {self.version} not supported")
        if not _CONVERSATION_ID_RE.match(self.conversation_id):
            raise StructuralError("conversationId must be 36-char hyphenated lowercase hex")
        if not isinstance(self.sender_name, str) or not self.sender_name:
            raise StructuralError("senderName must be a non-empty string")
        if len(self.sender_name.encode("utf-8")) > MAX_SENDER_NAME_BYTES:
            raise StructuralError(f"senderName exceeds {MAX_SENDER_NAME_BYTES} UTF-8 bytes")
        if not _is_int(self.timestamp) or self.timestamp < 0:
            raise StructuralError("timestamp must be a non-negative integer")
        if not _is_int(self.ttl) or self.ttl <= 0:
            raise StructuralError("ttl must be a positive integer")
        if not isinstance(self.msg_type, MsgType):
            raise StructuralError("unknown message type")
        if not _is_int(self.key_version) or self.key_version < 1:
            raise StructuralError("keyVersion must be an integer >= 1")
        if len(self.nonce) != NONCE_LEN:
            raise StructuralError(f"nonce must decode to {NONCE_LEN} bytes")
        if len(self.hmac) != HMAC_LEN:
            raise StructuralError(f"hmac must decode to {HMAC_LEN} bytes")


def encode_envelope(env: Envelope) -> bytes:
    """Serialize a valid envelope to its UTF-8 JSON wire payload."""
    env.validate()
    obj = {
        "version": env.version,
        "conversationId": env.conversation_id,
        "senderName": env.sender_name,
        "timestamp": env.timestamp,
        "ttl": env.ttl,
        "type": env.msg_type.value,
        "keyVersion": env.key_version,
        "nonce": base64.b64encode(env.nonce).decode("ascii"),
        "ciphertext": base64.b64encode(env.ciphertext).decode("ascii"),
        "hmac": base64.b64encode(env.hmac).decode("ascii"),
    }
    return json.dumps(obj, separators=(",", ":")).encode("utf-8")


def _decode_b64(obj: dict, key: str, expected_len: Optional[int] = None) -> bytes:
    value = obj[key]
    if not isinstance(value, str):
        raise StructuralError(f"{key} must be a Base64 string")
    try:
        raw = base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError):
        raise StructuralError(f"{key} is not valid Base64") from None
    if expected_len is not None and len(raw) != expected_len:
        raise StructuralError(f"{key} must decode to {expected_len} bytes, got {len(raw)}")
    return raw


def decode_envelope(payload: bytes) -> Envelope:
    """Parse and fully validate a wire payload. Rejects before any
    cryptographic processing; unknown extra keys are ignored for forward
    compatibility."""
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"payload is not UTF-8 JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise StructuralError("payload must be a JSON object")
    missing = [k for k in WIRE_KEYS if k not in obj]
    if missing:
        raise StructuralError(f"missing required fields: {', '.join(missing)}")
    if not _is_int(obj["version"]):
        raise StructuralError("version must be an integer")
    if obj["version"] != PROTOCOL_VERSION:
        raise UnsupportedVersionError(f"protocol version {obj['version']} not supported")
    type_name = obj["type"]
    try:
        msg_type = MsgType(type_name)
    except ValueError:
        raise StructuralError(f"unknown message type: {type_name!r}") from None
    env = Envelope(
        version=obj["version"],
        conversation_id=obj["conversationId"] if isinstance(obj["conversationId"], str) else "",
        sender_name=obj["senderName"] if isinstance(obj["senderName"], str) else "",
        timestamp=obj["timestamp"] if _is_int(obj["timestamp"]) else -1,
        ttl=obj["ttl"] if _is_int(obj["ttl"]) else 0,
        msg_type=msg_type,
        key_version=obj["keyVersion"] if _is_int(obj["keyVersion"]) else 0,
        nonce=_decode_b64(obj, "nonce", NONCE_LEN),
        ciphertext=_decode_b64(obj, "ciphertext"),
        hmac=_decode_b64(obj, "hmac", HMAC_LEN),
    )
    env.validate()
    return env


def frame(payload: bytes, max_envelope_bytes: int = DEFAULT_MAX_ENVELOPE_BYTES) -> bytes:
    """Prefix a payload with its 4-byte big-endian length."""
    if len(payload) == 0:
        raise StructuralError("cannot frame an empty payload")
    if len(payload) > max_envelope_bytes:
        raise OversizeError(f"payload of {len(payload)} bytes exceeds cap {max_envelope_bytes}")
    return struct.pack(">I", len(payload)) + payload


def _read_exact(stream, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = stream.read(n - len(buf))
        if not chunk:
            break
        buf.extend(chunk)
    return bytes(buf)


def deframe(stream, max_envelope_bytes: int = DEFAULT_MAX_ENVELOPE_BYTES) -> Optional[bytes]:
    """Read exactly one framed payload from a byte stream (an object with
    ``read(n)``). Returns None on clean end-of-stream before any header
    byte. The declared length is bounds-checked *before* any allocation
    proportional to it, so a hostile prefix cannot force a large buffer."""
    header = _read_exact(stream, FRAME_HEADER_LEN)
    if len(header) == 0:
        return None
    if len(header) < FRAME_HEADER_LEN:
        raise TruncationError("stream ended inside the length prefix")
    (length,) = struct.unpack(">I", header)
    if length == 0:
        raise StructuralError("declared frame length is zero")
    if length > max_envelope_bytes:
        raise OversizeError(f"declared length {length} exceeds cap {max_envelope_bytes}")
    payload = _read_exact(stream, length)
    if len(payload) < length:
        raise TruncationError(f"stream ended mid-payload: got {len(payload)} of {length} bytes")
    return payload


def _lp(data: bytes) -> bytes:
    return struct.pack(">I", len(data)) + data


def _lp_int(value: int) -> bytes:
    return _lp(struct.pack(">Q", value))


def _lp_str(value: str) -> bytes:
    return _lp(value.encode("utf-8"))


def hmac_input(env: Envelope) -> bytes:
    """Canonical byte string the envelope MAC covers: every field except
    the MAC itself, in fixed order, each length-prefixed so field
    boundaries are unambiguous regardless of content."""
    return b"".join(
        (
            _lp_int(env.version),
            _lp_str(env.conversation_id),
            _lp_str(env.sender_name),
            _lp_int(env.timestamp),
            _lp_int(env.ttl),
            _lp_str(env.msg_type.value),
            _lp_int(env.key_version),
            _lp(env.nonce),
            _lp(env.ciphertext),
        )
    )


def aad_input(conversation_id: str, sender_name: str, msg_type: MsgType, timestamp: int) -> bytes:
    """Associated data bound into the AEAD tag: conversation, sender, type,
    and timestamp in canonical length-prefixed form. Makes ciphertext
    transplants across conversations or senders fail authentication."""
    return b"".join(
        (
            _lp_str(conversation_id),
            _lp_str(sender_name),
            _lp_str(msg_type.value),
            _lp_int(timestamp),
        )
    )


@dataclass(frozen=True)
class Endpoint:
    """A strictly validated peer address. IPv6 is canonicalized to RFC 5952
    form and IPv4 to dotted-quad on construction, so equal endpoints always
    compare and render equal."""

    address: str
    port: int

    def __post_init__(self):
        if not isinstance(self.address, str) or "%" in self.address:
            # zone identifiers are host-local; they cannot name a peer
            raise StructuralError(f"invalid IP address: {self.address!r}")
        try:
            parsed = ipaddress.ip_address(self.address)
        except ValueError:
            raise StructuralError(f"invalid IP address: {self.address!r}") from None
        if not _is_int(self.port) or not (1 <= self.port <= 65_535):
            raise StructuralError(f"port must be 1..65535, got {self.port!r}")
        object.__setattr__(self, "address", parsed.compressed)

    def canonical(self) -> str:
        return f"{self.address}|{self.port}"


def conversation_id(a: Endpoint, b: Endpoint) -> str:
    """Deterministic, order-independent identifier for a peer pair: sort
    the canonical endpoint strings, hash, and render the first 16 digest
    bytes in hyphenated 8-4-4-4-12 lowercase hex."""
    if a == b:
        raise PreconditionError("conversation endpoints must be distinct")
    joined = "\n".join(sorted((a.canonical(), b.canonical())))
    digest = hashlib.sha256(joined.encode("utf-8")).digest()[:16]
    hexed = digest.hex()
    return f"{hexed[0:8]}-{hexed[8:12]}-{hexed[12:16]}-{hexed[16:20]}-{hexed[20:32]}"
