"""Transport tests over real loopback sockets: delivery, retry schedule,
listener resilience, and bounded memory under hostile length prefixes."""

import socket
import threading
import time

import pytest

from ember.envelope import Endpoint, Envelope, MsgType, frame
from ember.errors import TransportError
from ember.transport import (
    ConnState,
    DeliveryResult,
    Listener,
    RetryPolicy,
    send_envelope,
)

CONV = "abcdabcd-1111-4222-8333-444455556666"


def make_env(**overrides) -> Envelope:
    fields = dict(
        version=1,
        conversation_id=CONV,
        sender_name="alice",
        timestamp=1_700_000_000_000,
        ttl=300_000,
        msg_type=MsgType.MESSAGE,
        key_version=1,
        nonce=b"\x05" * 12,
        ciphertext=b"\xaa" * 40,
        hmac=b"\xbb" * 32,
    )
    fields.update(overrides)
    return Envelope(**fields)


@pytest.fixture
def listener():
    received = []
    lst = Listener(0, received.append, host="127.0.0.1")
    lst.start()
    yield lst, received
    lst.stop()


class TestSend:
    def test_loopback_delivery_first_attempt(self, listener):
        lst, received = listener
        result = send_envelope(Endpoint("127.0.0.1", lst.port), make_env())
        assert result == DeliveryResult(True, 1)
        deadline = time.time() + 2
        while not received and time.time() < deadline:
            time.sleep(0.01)
        assert received == [make_env()]

    def test_absent_peer_retry_schedule(self):
        sleeps = []
        policy = RetryPolicy(connect_timeout_ms=300, max_attempts=3, base_backoff_ms=500)
        result = send_envelope(
            Endpoint("127.0.0.1", 9), make_env(), policy, sleep=sleeps.append
        )
        assert result.delivered is False
        assert result.attempts == 3
        assert result.error is not None
        assert sleeps == [0.5, 1.0]  # base * 2^(attempt-1) between attempts

    def test_peer_coming_up_before_second_attempt(self):
        received = []
        # reserve a port, then bring the listener up from the retry sleep
        probe = socket.socket()
        probe.bind(("127.0.0.1", 0))
        port = probe.getsockname()[1]
        probe.close()

        late = Listener(port, received.append, host="127.0.0.1")

        def sleep_and_start(seconds):
            late.start()
            time.sleep(0.05)

        policy = RetryPolicy(connect_timeout_ms=500, max_attempts=3, base_backoff_ms=10)
        result = send_envelope(Endpoint("127.0.0.1", port), make_env(), policy, sleep=sleep_and_start)
        try:
            assert result.delivered is True
            assert result.attempts >= 2
        finally:
            late.stop()


class TestListener:
    def test_states_listening_then_disconnected(self):
        lst = Listener(0, lambda env: None, host="127.0.0.1")
        sub = lst.events.subscribe()
        lst.start()
        lst.stop()
        states = [s.value for s in sub.drain()]
        assert states[0] is ConnState.LISTENING
        assert states[-1] is ConnState.DISCONNECTED

    def test_stop_idempotent(self):
        lst = Listener(0, lambda env: None, host="127.0.0.1")
        lst.start()
        lst.stop()
        lst.stop()

    def test_bind_conflict_errors(self, listener):
        lst, _ = listener
        clash = Listener(lst.port, lambda env: None, host="127.0.0.1")
        sub = clash.events.subscribe()
        with pytest.raises(TransportError):
            clash.start()
        assert any(s.value is ConnState.ERROR for s in sub.drain())

    def test_handler_gets_decoded_envelope_exactly_once(self, listener):
        lst, received = listener
        send_envelope(Endpoint("127.0.0.1", lst.port), make_env())
        deadline = time.time() + 2
        while len(received) < 1 and time.time() < deadline:
            time.sleep(0.01)
        time.sleep(0.1)
        assert len(received) == 1

    def test_back_to_back_frames_one_connection(self, listener):
        lst, received = listener
        from ember.envelope import encode_envelope

        env1, env2 = make_env(), make_env(nonce=b"\x06" * 12)
        with socket.create_connection(("127.0.0.1", lst.port)) as sock:
            sock.sendall(frame(encode_envelope(env1)) + frame(encode_envelope(env2)))
        deadline = time.time() + 2
        while len(received) < 2 and time.time() < deadline:
            time.sleep(0.01)
        assert received == [env1, env2]

    def test_hostile_length_prefix_keeps_listener_alive(self, listener):
        lst, received = listener
        with socket.create_connection(("127.0.0.1", lst.port)) as sock:
            sock.sendall(b"\x7f\xff\xff\xff" + b"x" * 64)
        deadline = time.time() + 2
        while lst.counters["oversize"] < 1 and time.time() < deadline:
            time.sleep(0.01)
        assert lst.counters["oversize"] == 1
        # still accepts valid envelopes afterwards
        result = send_envelope(Endpoint("127.0.0.1", lst.port), make_env())
        assert result.delivered
        deadline = time.time() + 2
        while not received and time.time() < deadline:
            time.sleep(0.01)
        assert received == [make_env()]

    def test_junk_flood_then_valid(self, listener):
        lst, received = listener
        for i in range(20):
            try:
                with socket.create_connection(("127.0.0.1", lst.port), timeout=2) as sock:
                    sock.sendall(bytes([i % 7]) * 11)
            except OSError:
                pass
        result = send_envelope(
            Endpoint("127.0.0.1", lst.port), make_env(),
            RetryPolicy(connect_timeout_ms=2000, max_attempts=3, base_backoff_ms=100),
        )
        assert result.delivered
        deadline = time.time() + 5
        while not received and time.time() < deadline:
            time.sleep(0.01)
        assert make_env() in received

    def test_malformed_json_counted_not_fatal(self, listener):
        lst, received = listener
        with socket.create_connection(("127.0.0.1", lst.port)) as sock:
            sock.sendall(frame(b"this is not json"))
        deadline = time.time() + 2
        while lst.counters["malformed"] < 1 and time.time() < deadline:
            time.sleep(0.01)
        assert lst.counters["malformed"] == 1
        assert send_envelope(Endpoint("127.0.0.1", lst.port), make_env()).delivered


class TestBackoffTiming:
    def test_real_delays_match_schedule(self):
        # base 40ms -> waits 40, 80
        policy = RetryPolicy(connect_timeout_ms=200, max_attempts=3, base_backoff_ms=40)
        start = time.monotonic()
        send_envelope(Endpoint("127.0.0.1", 9), make_env(), policy)
        elapsed = time.monotonic() - start
        # 120ms of scheduled waits, +-20% scheduler tolerance plus connect overhead
        assert elapsed >= 0.096
        assert elapsed < 2.0
