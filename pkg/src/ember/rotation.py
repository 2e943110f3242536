"""Three-stage, mutually confirmed key rotation.

One FSM instance per conversation. The exchange is REQUEST -> CONFIRM ->
ACTIVATE: the initiator proposes the successor version with a random
32-byte challenge; the responder derives the candidate key and answers
with an HMAC of the challenge under the candidate's gate key (proving it
derived the same bytes) but does not activate; the initiator verifies the
response fail-closed and only then activates and emits ACTIVATE, upon
which the responder activates too. Verification failure aborts with the
active key unchanged; there is no proceed-anyway path. Challenge
verification carries no timestamps, so clock offset between peers cannot
make a legitimate rotation fail.

Timeouts return an in-flight FSM to IDLE with the old key intact, so a
lost CONFIRM or ACTIVATE never deadlocks messaging.
"""

from __future__ import annotations

import base64
import json
import secrets
import time
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Optional

from . import crypto
from .errors import RotationBusyError, RotationProtocolError
from .keystore import KeyStore

CHALLENGE_LEN = 32
DEFAULT_TIMEOUT_MS = 30_000


def now_ms() -> int:
    return time.time_ns() // 1_000_000


class RotationPhase(Enum):
    IDLE = "IDLE"
    REQUEST_SENT = "REQUEST_SENT"
    CONFIRM_SENT = "CONFIRM_SENT"
    ABORTED = "ABORTED"


@dataclass(frozen=True)
class RotationPayload:
    """Control payload carried encrypted inside a standard envelope."""

    proposed_version: int
    challenge: Optional[bytes] = None           # REQUEST only
    challenge_response: Optional[bytes] = None  # CONFIRM only

    def to_bytes(self) -> bytes:
        obj: dict = {"proposedVersion": self.proposed_version}
        if self.challenge is not None:
            obj["challenge"] = base64.b64encode(self.challenge).decode("ascii")
        if self.challenge_response is not None:
            obj["challengeResponse"] = base64.b64encode(self.challenge_response).decode("ascii")
        return json.dumps(obj, separators=(",", ":")).encode("utf-8")

    @classmethod
    def from_bytes(cls, data: bytes) -> "RotationPayload":
        try:
            obj = json.loads(data.decode("utf-8"))
            proposed = obj["proposedVersion"]
            if not isinstance(proposed, int) or isinstance(proposed, bool) or proposed < 2:
                raise ValueError("bad proposedVersion")
            challenge = base64.b64decode(obj["challenge"]) if "challenge" in obj else None
            response = (
                base64.b64decode(obj["challengeResponse"])
                if "challengeResponse" in obj
                else None
            )
        except (ValueError, KeyError, TypeError) as exc:
            raise RotationProtocolError(f"malformed rotation payload: {exc}") from None
        return cls(proposed, challenge, response)


class RotationFsm:
    """Per-conversation rotation state machine. Transitions must be called
    under the owner's per-conversation serialization; the FSM itself holds
    no lock."""

    def __init__(
        self,
        conversation_id: str,
        keystore: KeyStore,
        *,
        timeout_ms: int = DEFAULT_TIMEOUT_MS,
        clock: Callable[[], int] = now_ms,
        rng: Callable[[int], bytes] = secrets.token_bytes,
        on_phase: Optional[Callable[[str, RotationPhase], None]] = None,
    ):
        self.conversation_id = conversation_id
        self._keystore = keystore
        self.timeout_ms = timeout_ms
        self._clock = clock
        self._rng = rng
        self._on_phase = on_phase
        self.phase = RotationPhase.IDLE
        self.proposed_version = 0
        self.started_at = 0
        self._challenge: Optional[bytes] = None
        self._candidate: Optional[crypto.SymmetricKey] = None
        self._cached_confirm: Optional[RotationPayload] = None

    def _set_phase(self, phase: RotationPhase) -> None:
        self.phase = phase
        if self._on_phase is not None:
            self._on_phase(self.conversation_id, phase)

    def _clear(self) -> None:
        self.proposed_version = 0
        self.started_at = 0
        self._challenge = None
        self._candidate = None
        self._cached_confirm = None

    # --- transitions -------------------------------------------------------

    def initiate(self) -> RotationPayload:
        """IDLE -> REQUEST_SENT with a fresh challenge. Duplicate initiation
        while a rotation is in flight is rejected."""
        self.check_timeout()
        if self.phase in (RotationPhase.REQUEST_SENT, RotationPhase.CONFIRM_SENT):
            raise RotationBusyError(
                f"rotation already in flight for {self.conversation_id} ({self.phase.value})"
            )
        active = self._keystore.active_version(self.conversation_id)
        self._challenge = self._rng(CHALLENGE_LEN)
        self.proposed_version = active + 1
        self.started_at = self._clock()
        self._set_phase(RotationPhase.REQUEST_SENT)
        return RotationPayload(self.proposed_version, challenge=self._challenge)

    def handle_request(self, payload: RotationPayload) -> RotationPayload:
        """Responder path: derive the candidate key, answer the challenge,
        activate nothing yet. A repeated REQUEST for the same version while
        CONFIRM_SENT re-sends the same CONFIRM (lost-confirm recovery)."""
        self.check_timeout()
        if payload.challenge is None or len(payload.challenge) != CHALLENGE_LEN:
            raise RotationProtocolError("rotation request carries no valid challenge")
        if (
            self.phase is RotationPhase.CONFIRM_SENT
            and payload.proposed_version == self.proposed_version
            and self._cached_confirm is not None
        ):
            return self._cached_confirm
        if self.phase not in (RotationPhase.IDLE, RotationPhase.ABORTED):
            raise RotationProtocolError(
                f"rotation request while {self.phase.value}; concurrent initiation is "
                "resolved by the caller's tie-break"
            )
        active_version = self._keystore.active_version(self.conversation_id)
        if payload.proposed_version != active_version + 1:
            raise RotationProtocolError(
                f"proposed version {payload.proposed_version} is not the successor of "
                f"{active_version}"
            )
        active_key = self._keystore.active_key(self.conversation_id)
        candidate = crypto.derive_next_key(active_key, active_version, payload.proposed_version)
        response = crypto.hmac_sign(crypto.derive_hmac_key(candidate), payload.challenge)
        self._candidate = candidate
        self.proposed_version = payload.proposed_version
        self.started_at = self._clock()
        self._cached_confirm = RotationPayload(
            payload.proposed_version, challenge_response=response
        )
        self._set_phase(RotationPhase.CONFIRM_SENT)
        return self._cached_confirm

    def handle_confirm(self, payload: RotationPayload) -> Optional[RotationPayload]:
        """Initiator path: verify the challenge response in constant time.
        Success installs the new version and returns the ACTIVATE payload;
        failure aborts with the active key unchanged and returns None.
        Verification is mandatory; there is no proceed-on-failure path."""
        self.check_timeout()
        if self.phase is not RotationPhase.REQUEST_SENT:
            raise RotationProtocolError(f"unexpected rotation confirm while {self.phase.value}")
        if payload.proposed_version != self.proposed_version:
            raise RotationProtocolError(
                f"confirm for version {payload.proposed_version}, expected {self.proposed_version}"
            )
        if payload.challenge_response is None or self._challenge is None:
            raise RotationProtocolError("rotation confirm carries no challenge response")
        active_version = self._keystore.active_version(self.conversation_id)
        active_key = self._keystore.active_key(self.conversation_id)
        candidate = crypto.derive_next_key(active_key, active_version, self.proposed_version)
        ok = crypto.hmac_verify(
            crypto.derive_hmac_key(candidate), self._challenge, payload.challenge_response
        )
        if not ok:
            self._clear()
            self._set_phase(RotationPhase.ABORTED)
            return None
        self._keystore.install_key(self.conversation_id, candidate, payload.proposed_version)
        activate = RotationPayload(payload.proposed_version)
        self._clear()
        self._set_phase(RotationPhase.IDLE)
        return activate

    def handle_activate(self, payload: RotationPayload) -> None:
        """Responder path: activate the candidate derived at CONFIRM time.
        An ACTIVATE in any other phase (including a replay after
        completion) is a protocol error the caller ignores."""
        self.check_timeout()
        if self.phase is not RotationPhase.CONFIRM_SENT:
            raise RotationProtocolError(f"unexpected rotation activate while {self.phase.value}")
        if payload.proposed_version != self.proposed_version or self._candidate is None:
            raise RotationProtocolError(
                f"activate for version {payload.proposed_version}, expected {self.proposed_version}"
            )
        self._keystore.install_key(self.conversation_id, self._candidate, self.proposed_version)
        self._clear()
        self._set_phase(RotationPhase.IDLE)

    def abandon(self) -> None:
        """Drop an in-flight rotation (tie-break loser, undeliverable
        request). Fail-closed: the active key is untouched."""
        if self.phase in (RotationPhase.REQUEST_SENT, RotationPhase.CONFIRM_SENT):
            self._clear()
            self._set_phase(RotationPhase.IDLE)

    def check_timeout(self, now: Optional[int] = None) -> bool:
        """Return an in-flight rotation to IDLE once timeout_ms has
        elapsed. The active key is unchanged either way."""
        if self.phase not in (RotationPhase.REQUEST_SENT, RotationPhase.CONFIRM_SENT):
            return False
        now = self._clock() if now is None else now
        if now - self.started_at > self.timeout_ms:
            self._clear()
            self._set_phase(RotationPhase.IDLE)
            return True
        return False
