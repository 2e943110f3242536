"""Keyring retention and TOFU trust-state tests."""

import pytest

from ember import crypto
from ember.crypto import KeyRole, SymmetricKey
from ember.errors import NotFoundError, PreconditionError, VersionSequenceError
from ember.keystore import KeyStore, TrustStatus

CONV = "deadbeef-0000-0000-0000-000000000000"


def key_of(byte: int) -> SymmetricKey:
    return SymmetricKey(bytes([byte]) * 32)


class TestInstall:
    def test_first_install(self):
        ks = KeyStore()
        ks.install_key(CONV, key_of(1), 1)
        assert ks.active_version(CONV) == 1
        assert ks.ring(CONV).versions() == [1]

    def test_retention_cap_evicts_oldest(self):
        ks = KeyStore()
        for version in range(1, 7):
            ks.install_key(CONV, key_of(version), version)
        assert ks.ring(CONV).versions() == [2, 3, 4, 5, 6]
        assert ks.active_version(CONV) == 6

    def test_gap_rejected(self):
        ks = KeyStore()
        ks.install_key(CONV, key_of(1), 1)
        ks.install_key(CONV, key_of(2), 2)
        with pytest.raises(VersionSequenceError):
            ks.install_key(CONV, key_of(4), 4)

    def test_regression_rejected(self):
        ks = KeyStore()
        ks.install_key(CONV, key_of(1), 1)
        ks.install_key(CONV, key_of(2), 2)
        with pytest.raises(VersionSequenceError):
            ks.install_key(CONV, key_of(1), 1)

    def test_first_version_must_be_one(self):
        ks = KeyStore()
        with pytest.raises(VersionSequenceError):
            ks.install_key(CONV, key_of(1), 3)

    def test_non_conversation_key_rejected(self):
        ks = KeyStore()
        mk = crypto.derive_message_key(key_of(1), bytes(12))
        with pytest.raises(PreconditionError):
            ks.install_key(CONV, mk, 1)

    def test_consecutive_versions_invariant(self):
        ks = KeyStore(max_retained=3)
        for version in range(1, 10):
            ks.install_key(CONV, key_of(version), version)
            versions = ks.ring(CONV).versions()
            active = ks.active_version(CONV)
            assert versions == list(range(active - len(versions) + 1, active + 1))


class TestGet:
    def test_roundtrip(self):
        ks = KeyStore()
        ks.install_key(CONV, key_of(9), 1)
        assert ks.get_key(CONV, 1).raw == key_of(9).raw

    def test_evicted_version_not_found(self):
        ks = KeyStore()
        for version in range(1, 7):
            ks.install_key(CONV, key_of(version), version)
        with pytest.raises(NotFoundError):
            ks.get_key(CONV, 1)

    def test_unknown_conversation(self):
        with pytest.raises(NotFoundError):
            KeyStore().get_key("ffffffff-0000-0000-0000-000000000000", 1)


class TestTrust:
    def test_first_observation_unverified(self):
        ks = KeyStore()
        ks.install_key(CONV, key_of(1), 1)
        trust = ks.trust(CONV)
        assert trust.status is TrustStatus.UNVERIFIED
        assert trust.first_seen_fingerprint == crypto.fingerprint(key_of(1))

    def test_same_fingerprint_no_change(self):
        ks = KeyStore()
        ks.install_key(CONV, key_of(1), 1)
        trust = ks.observe_fingerprint(CONV, crypto.fingerprint(key_of(1)))
        assert trust.status is TrustStatus.UNVERIFIED

    def test_out_of_band_change_flags(self):
        ks = KeyStore()
        ks.install_key(CONV, key_of(1), 1)
        trust = ks.observe_fingerprint(CONV, crypto.fingerprint(key_of(7)))
        assert trust.status is TrustStatus.CHANGED

    def test_rotation_install_never_flags(self):
        ks = KeyStore()
        ks.install_key(CONV, key_of(1), 1)
        ks.mark_verified(CONV)
        next_key = crypto.derive_next_key(key_of(1), 1, 2)
        ks.install_key(CONV, next_key, 2)
        trust = ks.trust(CONV)
        assert trust.status is TrustStatus.VERIFIED
        assert trust.current_fingerprint == crypto.fingerprint(next_key)

    def test_mark_verified(self):
        ks = KeyStore()
        ks.install_key(CONV, key_of(1), 1)
        assert ks.mark_verified(CONV).status is TrustStatus.VERIFIED

    def test_reverify_clears_changed(self):
        ks = KeyStore()
        ks.install_key(CONV, key_of(1), 1)
        ks.observe_fingerprint(CONV, crypto.fingerprint(key_of(7)))
        assert ks.trust(CONV).status is TrustStatus.CHANGED
        assert ks.mark_verified(CONV).status is TrustStatus.VERIFIED

    def test_unknown_conversation(self):
        with pytest.raises(NotFoundError):
            KeyStore().mark_verified(CONV)
