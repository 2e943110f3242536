"""Cryptographic primitives: AES-256-GCM payload encryption, the
HMAC-SHA256 envelope gate, HKDF-SHA256 derivation, key fingerprints, and
best-effort buffer wiping.

All functions are pure and safe for concurrent use. Randomness comes from
the operating system CSPRNG via :mod:`secrets`; if the OS source is
unavailable the call fails, there is no fallback to weak randomness.

Derivation context labels are fixed protocol constants. Changing any of
them is a wire-breaking change: both peers derive message keys, HMAC keys,
and rotated conversation keys independently and must agree byte-for-byte.
"""

from __future__ import annotations

import hashlib
import hmac as _hmac
import secrets
import struct
from dataclasses import dataclass, field
from enum import Enum

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from .errors import AuthenticationError, MalformedInputError, PreconditionError

KEY_LEN = 32
NONCE_LEN = 12
TAG_LEN = 16
HMAC_LEN = 32
FINGERPRINT_PREFIX_LEN = 8

# Fixed derivation labels. The version prefix gives us a clean break if the
# derivation scheme ever has to change.
MESSAGE_KEY_INFO = b"ember:v1:msgkey"
HMAC_KEY_INFO = b"ember:v1:hmackey"
ROTATION_SALT_PREFIX = b"ember:v1:rotate:"
ROTATION_INFO_PREFIX = b"ember:v1:keyver:"

HKDF_MAX_LEN = 255 * hashlib.sha256().digest_size


class KeyRole(Enum):
    """What a key is for. Only CONVERSATION (and the store's own STORAGE
    master key) may ever be persisted; MESSAGE and HMAC keys are derived
    on demand and live only in memory."""

    CONVERSATION = "conversation"
    MESSAGE = "message"
    HMAC = "hmac"
    STORAGE = "storage"


PERSISTABLE_ROLES = frozenset({KeyRole.CONVERSATION, KeyRole.STORAGE})


@dataclass(frozen=True)
class SymmetricKey:
    """A 32-byte secret. ``raw`` is excluded from repr so key bytes never
    leak through logging or tracebacks."""

    raw: bytes = field(repr=False)
    role: KeyRole = KeyRole.CONVERSATION

    def __post_init__(self):
        if not isinstance(self.raw, (bytes, bytearray)):
            raise PreconditionError("key material must be bytes")
        if len(self.raw) != KEY_LEN:
            raise PreconditionError(f"key must be {KEY_LEN} bytes, got {len(self.raw)}")
        if isinstance(self.raw, bytearray):
            object.__setattr__(self, "raw", bytes(self.raw))


def generate_key() -> SymmetricKey:
    """Fresh 256-bit conversation key from the OS CSPRNG."""
    return SymmetricKey(secrets.token_bytes(KEY_LEN), KeyRole.CONVERSATION)


def generate_nonce() -> bytes:
    """Fresh 12-byte GCM nonce. Uniqueness per key is enforced upstream by
    the pipeline's replay/uniqueness tracking; this function only
    guarantees fresh randomness per call."""
    return secrets.token_bytes(NONCE_LEN)


def _check_nonce(nonce: bytes) -> None:
    if len(nonce) != NONCE_LEN:
        raise PreconditionError(f"nonce must be {NONCE_LEN} bytes, got {len(nonce)}")


def aead_encrypt(key: SymmetricKey, nonce: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    """AES-256-GCM. Returns ciphertext with the 16-byte tag appended, so
    output length is always len(plaintext) + 16."""
    _check_nonce(nonce)
    return AESGCM(key.raw).encrypt(nonce, bytes(plaintext), bytes(aad) if aad else None)


def aead_decrypt(key: SymmetricKey, nonce: bytes, ciphertext_and_tag: bytes, aad: bytes = b"") -> bytes:
    """Verify-and-decrypt. Raises AuthenticationError on tag mismatch and
    MalformedInputError when the input cannot even carry a tag; the two are
    distinct so the pipeline can count them separately. No partial
    plaintext is ever returned."""
    _check_nonce(nonce)
    if len(ciphertext_and_tag) < TAG_LEN:
        raise MalformedInputError(
            f"ciphertext too short to carry a {TAG_LEN}-byte tag: {len(ciphertext_and_tag)}"
        )
    try:
        return AESGCM(key.raw).decrypt(nonce, bytes(ciphertext_and_tag), bytes(aad) if aad else None)
    except InvalidTag:
        raise AuthenticationError("AEAD tag verification failed") from None


def hmac_sha256(key: bytes, data: bytes) -> bytes:
    """Raw HMAC-SHA256 over an arbitrary-length key (RFC 2104/4231
    semantics). Building block for the protocol wrappers and HKDF."""
    return _hmac.new(key, data, hashlib.sha256).digest()


def hmac_sign(key: SymmetricKey, data: bytes) -> bytes:
    """32-byte envelope MAC, deterministic in (key, data)."""
    return hmac_sha256(key.raw, data)


def hmac_verify(key: SymmetricKey, data: bytes, tag: bytes) -> bool:
    """Constant-time tag check. A length mismatch may exit early (length
    is not secret); equal-length comparison accumulates over the full
    array before deciding (hmac.compare_digest)."""
    if len(tag) != HMAC_LEN:
        return False
    return _hmac.compare_digest(hmac_sign(key, data), tag)


def hkdf_extract(salt: bytes, ikm: bytes) -> bytes:
    """RFC 5869 extract step. An empty salt is replaced by a zero-filled
    block of hash length, as the RFC specifies."""
    if not salt:
        salt = b"\x00" * hashlib.sha256().digest_size
    return hmac_sha256(salt, ikm)


def hkdf_expand(prk: bytes, info: bytes, length: int) -> bytes:
    """RFC 5869 expand step with SHA-256; length capped at 255*32."""
    if length < 0 or length > HKDF_MAX_LEN:
        raise PreconditionError(f"hkdf expand length must be 0..{HKDF_MAX_LEN}, got {length}")
    if len(prk) < hashlib.sha256().digest_size:
        raise PreconditionError("prk shorter than hash length")
    okm = b""
    block = b""
    counter = 1
    while len(okm) < length:
        block = hmac_sha256(prk, block + info + bytes([counter]))
        okm += block
        counter += 1
    return okm[:length]


def _require_conversation_key(key: SymmetricKey) -> None:
    if key.role is not KeyRole.CONVERSATION:
        raise PreconditionError(f"expected a conversation key, got role {key.role.value}")


def derive_next_key(current: SymmetricKey, current_version: int, target_version: int) -> SymmetricKey:
    """Deterministic version-to-version evolution for the rotation
    protocol. The salt binds the current version, the info the target, so
    every (version, version+1) step is domain-separated. Both peers run
    this independently and must land on identical bytes."""
    _require_conversation_key(current)
    if current_version < 1:
        raise PreconditionError("current version must be >= 1")
    if target_version != current_version + 1:
        raise PreconditionError(
            f"target version must be the successor of {current_version}, got {target_version}"
        )
    salt = ROTATION_SALT_PREFIX + struct.pack(">I", current_version)
    info = ROTATION_INFO_PREFIX + struct.pack(">I", target_version)
    okm = hkdf_expand(hkdf_extract(salt, current.raw), info, KEY_LEN)
    return SymmetricKey(okm, KeyRole.CONVERSATION)


def derive_message_key(conversation_key: SymmetricKey, nonce: bytes) -> SymmetricKey:
    """Per-message encryption key: HKDF with the message nonce as salt.
    Distinct nonces give distinct keys with overwhelming probability."""
    _require_conversation_key(conversation_key)
    _check_nonce(nonce)
    okm = hkdf_expand(hkdf_extract(nonce, conversation_key.raw), MESSAGE_KEY_INFO, KEY_LEN)
    return SymmetricKey(okm, KeyRole.MESSAGE)


def derive_hmac_key(conversation_key: SymmetricKey) -> SymmetricKey:
    """Envelope-gate key for a conversation key version. Label-separated
    from message keys and rotation derivation."""
    _require_conversation_key(conversation_key)
    okm = hkdf_expand(hkdf_extract(b"", conversation_key.raw), HMAC_KEY_INFO, KEY_LEN)
    return SymmetricKey(okm, KeyRole.HMAC)


def fingerprint(key: SymmetricKey) -> str:
    """Human-comparable rendering of the key: first 8 bytes of SHA-256,
    colon-separated uppercase hex pairs (e.g. ``1F:2A:...``)."""
    digest = hashlib.sha256(key.raw).digest()[:FINGERPRINT_PREFIX_LEN]
    return ":".join(f"{b:02X}" for b in digest)


def secure_wipe(buffer) -> None:
    """Zero a mutable byte buffer in place. CPython performs the writes
    eagerly (no dead-store elimination), but the interpreter may hold other
    copies of the data; this is best-effort hygiene, not a guarantee."""
    n = len(buffer)
    if n == 0:
        return
    if isinstance(buffer, memoryview):
        buffer[:] = b"\x00" * n
    else:
        buffer[0:n] = b"\x00" * n
