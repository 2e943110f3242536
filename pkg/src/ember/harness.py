"""In-process adversarial harness: two full peers joined by a programmable
fault-injecting proxy, with byte-exact frame capture and a plaintext-search
oracle.

The proxy sits at the frame level: every outbound envelope is framed to
wire bytes, logged, subjected to the fault plan (tamper/replay/drop/
reorder/truncate/oversize), and delivered into the receiving peer's real
byte-level input path (deframe -> decode -> receive pipeline), so framing
and validation defenses stay in the loop. Scenarios run single-threaded on
a fake millisecond clock with seeded randomness, which makes every run,
including its capture log, bit-for-bit reproducible from (plan, seed,
script).
"""

from __future__ import annotations

import dataclasses
import io
import json
import random
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from .crypto import KeyRole, SymmetricKey
from .envelope import (
    DEFAULT_MAX_ENVELOPE_BYTES,
    Endpoint,
    decode_envelope,
    deframe,
    encode_envelope,
    frame,
)
from .errors import MalformedInputError, PreconditionError
from .keystore import KeyStore
from .pipeline import Peer
from .store import Store
from .transport import DeliveryResult

PASS_THROUGH = "passThrough"
TAMPER_BIT = "tamperBit"
REPLAY = "replay"
DROP = "drop"
REORDER = "reorder"
OVERSIZE_LENGTH = "oversizeLength"
TRUNCATE = "truncate"

_KINDS = {PASS_THROUGH, TAMPER_BIT, REPLAY, DROP, REORDER, OVERSIZE_LENGTH, TRUNCATE}


@dataclass(frozen=True)
class FaultAction:
    kind: str
    frame: int = -1           # target frame index (order of arrival at the proxy)
    byte: int = 0             # tamperBit
    bit: int = 0              # tamperBit
    other: int = -1           # reorder: the later frame the target waits for
    declared_length: int = 0  # oversizeLength
    keep: int = 0             # truncate

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise PreconditionError(f"unknown fault action kind: {self.kind}")


def tamper_bit(frame_index: int, byte_offset: int, bit_index: int) -> FaultAction:
    return FaultAction(TAMPER_BIT, frame=frame_index, byte=byte_offset, bit=bit_index)


def replay_frame(frame_index: int) -> FaultAction:
    return FaultAction(REPLAY, frame=frame_index)


def drop_frame(frame_index: int) -> FaultAction:
    return FaultAction(DROP, frame=frame_index)


def reorder_frames(first: int, second: int) -> FaultAction:
    if second <= first:
        raise PreconditionError("reorder requires first < second")
    return FaultAction(REORDER, frame=first, other=second)


def oversize_length(declared_length: int) -> FaultAction:
    return FaultAction(OVERSIZE_LENGTH, declared_length=declared_length)


def truncate_frame(frame_index: int, keep_bytes: int) -> FaultAction:
    return FaultAction(TRUNCATE, frame=frame_index, keep=keep_bytes)


@dataclass
class FaultPlan:
    """Ordered fault schedule; deterministic given (plan, seed)."""

    actions: List[FaultAction] = field(default_factory=list)
    seed: int = 0

    def to_obj(self) -> dict:
        defaults = {f.name: f.default for f in dataclasses.fields(FaultAction)}
        return {
            "seed": self.seed,
            "actions": [
                {k: v for k, v in vars(a).items() if k == "kind" or v != defaults[k]}
                for a in self.actions
            ],
        }

    @classmethod
    def from_obj(cls, obj: dict) -> "FaultPlan":
        actions = [FaultAction(**a) for a in obj.get("actions", [])]
        return cls(actions, obj.get("seed", 0))


@dataclass(frozen=True)
class CaptureEntry:
    direction: str  # e.g. "A->B"
    data: bytes
    note: str = ""  # "", "tampered", "truncated", "replayed", "injected", "dropped"


@dataclass
class CaptureLog:
    entries: List[CaptureEntry] = field(default_factory=list)

    def append(self, direction: str, data: bytes, note: str = "") -> None:
        self.entries.append(CaptureEntry(direction, data, note))

    def delivered_bytes(self) -> List[bytes]:
        return [e.data for e in self.entries if e.note != "dropped"]


def search_capture(log: CaptureLog, probes: List[str | bytes]) -> int:
    """Count byte-subsequence occurrences of every probe across all
    captured frames."""
    total = 0
    for probe in probes:
        needle = probe.encode("utf-8") if isinstance(probe, str) else probe
        if not needle:
            continue
        for entry in log.entries:
            start = 0
            while True:
                idx = entry.data.find(needle, start)
                if idx < 0:
                    break
                total += 1
                start = idx + 1
    return total


@dataclass
class ScenarioReport:
    sent: int
    delivered: int
    rejections: Dict[str, int]
    transport_errors: int
    capture: CaptureLog
    stage_logs: Dict[str, List[Tuple[int, str, str]]]
    active_versions: Dict[str, int]
    active_keys_match: bool
    plaintexts: List[str]
    displayed: Dict[str, List[str]]
    store_files: Dict[str, Path]
    rotation_phases: Dict[str, str]
    partial: bool = False

    def summary_obj(self) -> dict:
        """Deterministic digest used by reproducibility checks."""
        return {
            "sent": self.sent,
            "delivered": self.delivered,
            "rejections": dict(sorted(self.rejections.items())),
            "transport_errors": self.transport_errors,
            "capture": [
                [e.direction, e.note, e.data.hex()] for e in self.capture.entries
            ],
            "active_versions": self.active_versions,
            "active_keys_match": self.active_keys_match,
            "displayed": self.displayed,
            "rotation_phases": self.rotation_phases,
        }


class _ScenarioClock:
    def __init__(self, start: int = 1_750_000_000_000, step_ms: int = 250):
        self.t = start
        self.step_ms = step_ms

    def __call__(self) -> int:
        return self.t

    def tick(self) -> None:
        self.t += self.step_ms


class FaultProxy:
    """Frame-level adversary between the two peers."""

    def __init__(self, plan: FaultPlan, capture: CaptureLog):
        self.plan = plan
        self.capture = capture
        self.counter = 0
        self.transport_errors = 0
        self._held: Dict[int, Tuple[str, str, bytes]] = {}  # first -> (src, dst, bytes)
        self._receivers: Dict[str, "ScenarioPeer"] = {}

    def register(self, name: str, peer: "ScenarioPeer") -> None:
        self._receivers[name] = peer

    def inject_oversize(self, target: str, declared_length: int) -> None:
        header = declared_length.to_bytes(4, "big")
        data = header + b"\x00" * 32  # header promises more than will ever come
        self.capture.append(f"?->{target}", data, "injected")
        self._deliver(target, data)

    def _actions_for(self, index: int) -> List[FaultAction]:
        return [a for a in self.plan.actions if a.frame == index]

    def transmit(self, src: str, dst: str, data: bytes) -> None:
        index = self.counter
        self.counter += 1
        direction = f"{src}->{dst}"
        actions = self._actions_for(index)

        dropped = any(a.kind == DROP for a in actions)
        held_for = next((a.other for a in actions if a.kind == REORDER), None)
        out = data
        note = ""
        for action in actions:
            if action.kind == TAMPER_BIT:
                buf = bytearray(out)
                if action.byte < len(buf):
                    buf[action.byte] ^= 1 << (action.bit % 8)
                out = bytes(buf)
                note = "tampered"
            elif action.kind == TRUNCATE:
                out = out[: action.keep]
                note = "truncated"

        self.capture.append(direction, out, "dropped" if dropped else note)
        if dropped:
            pass
        elif held_for is not None:
            self._held[held_for] = (src, dst, out)
        else:
            self._deliver(dst, out)
            for action in actions:
                if action.kind == REPLAY:
                    self.capture.append(direction, out, "replayed")
                    self._deliver(dst, out)

        # release any frame that was waiting for this index
        waiting = self._held.pop(index, None)
        if waiting is not None:
            w_src, w_dst, w_data = waiting
            self.capture.append(f"{w_src}->{w_dst}", w_data, "reordered")
            self._deliver(w_dst, w_data)

    def flush_held(self) -> None:
        for first in sorted(self._held):
            src, dst, data = self._held.pop(first)
            self.capture.append(f"{src}->{dst}", data, "reordered")
            self._deliver(dst, data)

    def _deliver(self, dst: str, data: bytes) -> None:
        receiver = self._receivers[dst]
        if not receiver.inbound_bytes(data):
            self.transport_errors += 1


class ScenarioPeer:
    """A full pipeline instance whose transport is the proxy."""

    def __init__(
        self,
        name: str,
        endpoint: Endpoint,
        store_path: Path,
        clock: _ScenarioClock,
        rng_seed: int,
        max_envelope_bytes: int = DEFAULT_MAX_ENVELOPE_BYTES,
    ):
        self.name = name
        self.endpoint = endpoint
        self.max_envelope_bytes = max_envelope_bytes
        rand = random.Random(rng_seed)
        master = SymmetricKey(bytes(range(32)), KeyRole.STORAGE)
        self.store = Store.open(store_path, master)
        self.peer = Peer(
            store=self.store,
            keystore=KeyStore(),
            local_endpoint=endpoint,
            display_name=name.lower(),
            clock=clock,
            rng=lambda n: rand.randbytes(n),
        )

    def wire(self, proxy: FaultProxy, self_name: str, other_name: str) -> None:
        def send(endpoint: Endpoint, env) -> DeliveryResult:
            payload = encode_envelope(env)
            proxy.transmit(self_name, other_name, frame(payload, self.max_envelope_bytes))
            return DeliveryResult(True, 1)

        self.peer.set_sender(send)

    def inbound_bytes(self, data: bytes) -> bool:
        """Byte-level receive path, mirroring the TCP listener: deframe,
        decode, hand to the pipeline. Returns False on transport-level
        rejection (malformed/oversize/truncated frames)."""
        stream = io.BytesIO(data)
        try:
            while True:
                payload = deframe(stream, self.max_envelope_bytes)
                if payload is None:
                    return True
                env = decode_envelope(payload)
                self.peer.receive_envelope(env)
        except MalformedInputError:
            return False


def run_scenario(
    plan: FaultPlan,
    script: List[Tuple[str, str, Optional[str]]],
    *,
    base_dir: Optional[Path] = None,
    timeout_s: float = 60.0,
) -> ScenarioReport:
    """Execute a scripted two-peer exchange ("A"/"B" send/rotate/sweep
    steps) through the fault proxy and report outcomes, rejections by
    category, the capture log, and both peers' stage logs."""
    import tempfile

    if base_dir is None:
        base_dir = Path(tempfile.mkdtemp(prefix="ember-scenario-"))
    base_dir = Path(base_dir)
    base_dir.mkdir(parents=True, exist_ok=True)

    clock = _ScenarioClock()
    capture = CaptureLog()
    proxy = FaultProxy(plan, capture)

    endpoint_a = Endpoint("2001:db8::a", 5896)
    endpoint_b = Endpoint("2001:db8::b", 5897)
    peer_a = ScenarioPeer("A", endpoint_a, base_dir / "peer_a.embr", clock, plan.seed * 2 + 1)
    peer_b = ScenarioPeer("B", endpoint_b, base_dir / "peer_b.embr", clock, plan.seed * 2 + 2)
    proxy.register("A", peer_a)
    proxy.register("B", peer_b)
    peer_a.wire(proxy, "A", "B")
    peer_b.wire(proxy, "B", "A")

    shared = SymmetricKey(random.Random(plan.seed).randbytes(32))
    peer_a.peer.add_contact("bob", endpoint_b, shared)
    peer_b.peer.add_contact("alice", endpoint_a, shared)
    conv = peer_a.peer.store.get_contacts()[0].conversation_id

    for action in plan.actions:
        if action.kind == OVERSIZE_LENGTH:
            proxy.inject_oversize("B", action.declared_length)

    peers = {"A": peer_a, "B": peer_b}
    plaintexts: List[str] = []
    sent = 0
    partial = False
    deadline = time.monotonic() + timeout_s

    for step in script:
        if time.monotonic() > deadline:
            partial = True
            break
        if isinstance(step, (tuple, list)):
            name, verb, arg = (tuple(step) + (None,))[:3]
        else:
            name, verb, arg = step["peer"], step["action"], step.get("arg")
        clock.tick()
        actor = peers[name]
        if verb == "send":
            plaintexts.append(arg)
            actor.peer.send_message(conv, arg)
            sent += 1
        elif verb == "rotate":
            actor.peer.start_rotation(conv)
        elif verb == "sweep":
            actor.peer.sweep_expired()
        else:
            raise PreconditionError(f"unknown script action: {verb}")

    proxy.flush_held()

    # display pass: decrypt everything readable, as a UI session would
    displayed: Dict[str, List[str]] = {}
    for name, sp in peers.items():
        shown = []
        for rec in reversed(sp.peer.store.query_messages(conv)):
            try:
                shown.append(sp.peer.decrypt_for_display(rec))
            except Exception:
                shown.append(None)
        displayed[name] = shown

    rejections: Dict[str, int] = {}
    for sp in peers.values():
        for reason, count in sp.peer.rejection_counts.items():
            rejections[reason] = rejections.get(reason, 0) + count

    delivered = sum(
        1
        for sp in peers.values()
        for rec in sp.peer.store.query_messages(conv)
        if rec.direction.value == "RECEIVED"
    )

    versions = {
        name: sp.peer.keystore.active_version(conv) for name, sp in peers.items()
    }
    keys_match = (
        peer_a.peer.keystore.active_key(conv).raw == peer_b.peer.keystore.active_key(conv).raw
    )
    phases = {name: sp.peer.rotation_phase(conv).value for name, sp in peers.items()}

    stage_logs = {name: sp.peer.stage_log.all_entries() for name, sp in peers.items()}
    store_files = {name: sp.store.path for name, sp in peers.items()}
    for sp in peers.values():
        sp.store.close()

    return ScenarioReport(
        sent=sent,
        delivered=delivered,
        rejections=rejections,
        transport_errors=proxy.transport_errors,
        capture=capture,
        stage_logs=stage_logs,
        active_versions=versions,
        active_keys_match=keys_match,
        plaintexts=plaintexts,
        displayed=displayed,
        store_files=store_files,
        rotation_phases=phases,
        partial=partial,
    )


def alternating_messages(count: int, prefix: str = "scenario message") -> List[Tuple[str, str, str]]:
    """The standard bidirectional script: peers alternate `count` sends."""
    script = []
    for i in range(count):
        peer = "A" if i % 2 == 0 else "B"
        script.append((peer, "send", f"{prefix} {i + 1} from {peer}"))
    return script


# --- text fixture format -----------------------------------------------------

def save_scenario(path: str | Path, plan: FaultPlan, script: List[Tuple[str, str, Optional[str]]]) -> None:
    obj = {
        "plan": plan.to_obj(),
        "script": [
            {"peer": s[0], "action": s[1], **({"arg": s[2]} if len(s) > 2 and s[2] is not None else {})}
            for s in script
        ],
    }
    Path(path).write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def load_scenario(path: str | Path) -> Tuple[FaultPlan, List[Tuple[str, str, Optional[str]]]]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    plan = FaultPlan.from_obj(obj["plan"])
    script = [
        (s["peer"], s["action"], s.get("arg")) for s in obj.get("script", [])
    ]
    return plan, script
