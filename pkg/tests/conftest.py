"""Shared fixtures: a deterministic two-peer world wired back-to-back in
memory (no sockets), used by pipeline and rotation-integration tests."""

import random

import pytest

from ember.crypto import SymmetricKey
from ember.envelope import Endpoint
from ember.keystore import KeyStore
from ember.pipeline import Peer
from ember.store import Store
from ember.transport import DeliveryResult


class FakeClock:
    def __init__(self, start=1_700_000_000_000):
        self.t = start

    def __call__(self):
        return self.t

    def advance(self, ms):
        self.t += ms
        return self.t


def seeded_rng(seed: int):
    rand = random.Random(seed)
    return lambda n: rand.randbytes(n)


class TwoPeers:
    """alice and bob with a shared imported key, delivering envelopes to
    each other synchronously in memory."""

    def __init__(self, tmp_path, clock=None, deliver=True):
        from ember.crypto import KeyRole

        self.clock = clock or FakeClock()
        self.endpoint_a = Endpoint("2001:db8::a", 5896)
        self.endpoint_b = Endpoint("2001:db8::b", 5897)
        master = SymmetricKey(b"\x33" * 32, KeyRole.STORAGE)
        self.store_a = Store.open(tmp_path / "a.embr", master)
        self.store_b = Store.open(tmp_path / "b.embr", master)
        self.alice = Peer(
            store=self.store_a,
            keystore=KeyStore(),
            local_endpoint=self.endpoint_a,
            display_name="alice",
            clock=self.clock,
            rng=seeded_rng(101),
        )
        self.bob = Peer(
            store=self.store_b,
            keystore=KeyStore(),
            local_endpoint=self.endpoint_b,
            display_name="bob",
            clock=self.clock,
            rng=seeded_rng(202),
        )
        self.dropped = []
        if deliver:
            self.alice.set_sender(self._make_sender(self.bob))
            self.bob.set_sender(self._make_sender(self.alice))

        self.shared_key = SymmetricKey(b"\x77" * 32)
        self.alice.add_contact("bob", self.endpoint_b, self.shared_key)
        self.bob.add_contact("alice", self.endpoint_a, self.shared_key)
        self.conv = self.alice.store.get_contacts()[0].conversation_id

    def _make_sender(self, receiver):
        def send(endpoint, env):
            receiver.receive_envelope(env)
            return DeliveryResult(True, 1)

        return send

    def close(self):
        self.store_a.close()
        self.store_b.close()


@pytest.fixture
def two_peers(tmp_path):
    world = TwoPeers(tmp_path)
    yield world
    world.close()
