"""Versioned conversation-key rings with bounded retention, plus
trust-on-first-use fingerprint state.

The keystore is the in-memory authority; persistence is wired by the owner
through the ``on_change`` hook (the pipeline saves rings and trust into the
encrypted store, the single on-disk location for key material).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional

from .crypto import KeyRole, SymmetricKey, fingerprint
from .errors import NotFoundError, PreconditionError, VersionSequenceError

DEFAULT_MAX_RETAINED = 5


class TrustStatus(Enum):
    UNVERIFIED = "UNVERIFIED"
    VERIFIED = "VERIFIED"
    CHANGED = "CHANGED"


@dataclass
class TrustState:
    """TOFU state for one conversation. ``status`` is CHANGED exactly when
    the current fingerprint differs from the accepted baseline without an
    intervening completed rotation (rotations move the baseline)."""

    conversation_id: str
    first_seen_fingerprint: str
    current_fingerprint: str
    status: TrustStatus = TrustStatus.UNVERIFIED
    # Status to fall back to if the fingerprint returns to baseline.
    base_status: TrustStatus = TrustStatus.UNVERIFIED

    def _recompute(self) -> None:
        if self.current_fingerprint != self.first_seen_fingerprint:
            self.status = TrustStatus.CHANGED
        else:
            self.status = self.base_status


@dataclass
class VersionedKeyRing:
    """Consecutive key versions for one conversation; at most
    ``max_retained`` entries, oldest evicted first."""

    conversation_id: str
    entries: Dict[int, SymmetricKey] = field(default_factory=dict)
    active_version: int = 0
    max_retained: int = DEFAULT_MAX_RETAINED

    def versions(self) -> list[int]:
        return sorted(self.entries)


class KeyStore:
    """Thread-safe keyring and trust registry. All mutations for a
    conversation are serialized; reads return consistent snapshots."""

    def __init__(self, max_retained: int = DEFAULT_MAX_RETAINED,
                 on_change: Optional[Callable[[str], None]] = None):
        if max_retained < 1:
            raise PreconditionError("max_retained must be >= 1")
        self._max_retained = max_retained
        self._rings: Dict[str, VersionedKeyRing] = {}
        self._trust: Dict[str, TrustState] = {}
        self._lock = threading.RLock()
        self.on_change = on_change

    def _notify(self, conversation_id: str) -> None:
        if self.on_change is not None:
            self.on_change(conversation_id)

    def install_key(self, conversation_id: str, key: SymmetricKey, version: int) -> None:
        """Install the next key version (or version 1 on an empty ring),
        evicting the oldest entry beyond the retention cap. Updates the
        trust baseline without flagging CHANGED: installation is the
        legitimate path (contact creation or a completed rotation)."""
        if key.role is not KeyRole.CONVERSATION:
            raise PreconditionError("only conversation keys can be installed")
        with self._lock:
            ring = self._rings.get(conversation_id)
            if ring is None:
                if version != 1:
                    raise VersionSequenceError(
                        f"first key for a conversation must be version 1, got {version}"
                    )
                ring = VersionedKeyRing(conversation_id, max_retained=self._max_retained)
                self._rings[conversation_id] = ring
            elif version != ring.active_version + 1:
                raise VersionSequenceError(
                    f"expected version {ring.active_version + 1}, got {version}"
                )
            ring.entries[version] = key
            ring.active_version = version
            while len(ring.entries) > ring.max_retained:
                del ring.entries[min(ring.entries)]

            fp = fingerprint(key)
            trust = self._trust.get(conversation_id)
            if trust is None:
                self._trust[conversation_id] = TrustState(
                    conversation_id, fp, fp, TrustStatus.UNVERIFIED, TrustStatus.UNVERIFIED
                )
            else:
                trust.first_seen_fingerprint = fp
                trust.current_fingerprint = fp
                trust._recompute()
            self._notify(conversation_id)

    def get_key(self, conversation_id: str, version: int) -> SymmetricKey:
        with self._lock:
            ring = self._rings.get(conversation_id)
            if ring is None:
                raise NotFoundError(f"unknown conversation: {conversation_id}")
            key = ring.entries.get(version)
            if key is None:
                raise NotFoundError(
                    f"key version {version} not retained for {conversation_id}"
                )
            return key

    def active_version(self, conversation_id: str) -> int:
        with self._lock:
            ring = self._rings.get(conversation_id)
            if ring is None:
                raise NotFoundError(f"unknown conversation: {conversation_id}")
            return ring.active_version

    def active_key(self, conversation_id: str) -> SymmetricKey:
        return self.get_key(conversation_id, self.active_version(conversation_id))

    def ring(self, conversation_id: str) -> VersionedKeyRing:
        with self._lock:
            ring = self._rings.get(conversation_id)
            if ring is None:
                raise NotFoundError(f"unknown conversation: {conversation_id}")
            return VersionedKeyRing(
                ring.conversation_id, dict(ring.entries), ring.active_version, ring.max_retained
            )

    def conversations(self) -> list[str]:
        with self._lock:
            return sorted(self._rings)

    def has_conversation(self, conversation_id: str) -> bool:
        with self._lock:
            return conversation_id in self._rings

    def trust(self, conversation_id: str) -> TrustState:
        with self._lock:
            trust = self._trust.get(conversation_id)
            if trust is None:
                raise NotFoundError(f"unknown conversation: {conversation_id}")
            return TrustState(
                trust.conversation_id,
                trust.first_seen_fingerprint,
                trust.current_fingerprint,
                trust.status,
                trust.base_status,
            )

    def mark_verified(self, conversation_id: str) -> TrustState:
        """User confirmed the fingerprint out-of-band; the current key
        becomes the verified baseline (also clears CHANGED)."""
        with self._lock:
            trust = self._trust.get(conversation_id)
            if trust is None:
                raise NotFoundError(f"unknown conversation: {conversation_id}")
            trust.first_seen_fingerprint = trust.current_fingerprint
            trust.base_status = TrustStatus.VERIFIED
            trust._recompute()
            self._notify(conversation_id)
            return self.trust(conversation_id)

    def observe_fingerprint(self, conversation_id: str, fp: str) -> TrustState:
        """Record a fingerprint seen outside the install path. A value that
        differs from the baseline flags CHANGED until re-verified."""
        with self._lock:
            trust = self._trust.get(conversation_id)
            if trust is None:
                raise NotFoundError(f"unknown conversation: {conversation_id}")
            trust.current_fingerprint = fp
            trust._recompute()
            self._notify(conversation_id)
            return self.trust(conversation_id)

    def load_ring(self, ring: VersionedKeyRing, trust: Optional[TrustState] = None) -> None:
        """Restore persisted state (bypasses the successor rule; used only
        when rehydrating from the store)."""
        if ring.active_version not in ring.entries:
            raise PreconditionError("active version missing from restored ring")
        for key in ring.entries.values():
            if key.role is not KeyRole.CONVERSATION:
                raise PreconditionError("restored ring contains a non-conversation key")
        with self._lock:
            self._rings[ring.conversation_id] = VersionedKeyRing(
                ring.conversation_id, dict(ring.entries), ring.active_version, ring.max_retained
            )
            if trust is not None:
                self._trust[ring.conversation_id] = trust
            elif ring.conversation_id not in self._trust:
                fp = fingerprint(ring.entries[ring.active_version])
                self._trust[ring.conversation_id] = TrustState(
                    ring.conversation_id, fp, fp
                )
