"""Crypto primitive tests: frozen RFC/GCM vectors, bit-flip sweeps, and
derivation domain-separation properties."""

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ember import crypto
from ember.crypto import KeyRole, SymmetricKey
from ember.errors import AuthenticationError, MalformedInputError, PreconditionError

KEY = SymmetricKey(bytes(range(32)))


class TestGeneration:
    def test_key_length_and_role(self):
        key = crypto.generate_key()
        assert len(key.raw) == 32
        assert key.role is KeyRole.CONVERSATION
        assert key.raw != bytes(32)

    def test_keys_pairwise_distinct(self):
        # oracle: collect-and-compare; collisions at 256 bits are ~impossible
        keys = {crypto.generate_key().raw for _ in range(1000)}
        assert len(keys) == 1000

    def test_nonce_length_and_freshness(self):
        nonces = {crypto.generate_nonce() for _ in range(100_000)}
        assert len(nonces) == 100_000
        assert all(len(n) == 12 for n in [crypto.generate_nonce() for _ in range(5)])

    def test_bad_key_material_rejected(self):
        with pytest.raises(PreconditionError):
            SymmetricKey(b"short")

    def test_key_repr_hides_bytes(self):
        key = SymmetricKey(b"\xab" * 32)
        assert "\\xab" not in repr(key) and "abab" not in repr(key)


class TestAead:
    def test_roundtrip(self):
        nonce = crypto.generate_nonce()
        ct = crypto.aead_encrypt(KEY, nonce, b"hello", b"aad")
        assert crypto.aead_decrypt(KEY, nonce, ct, b"aad") == b"hello"

    def test_output_length_is_plaintext_plus_tag(self):
        nonce = bytes(12)
        assert len(crypto.aead_encrypt(KEY, nonce, b"", b"")) == 16
        assert len(crypto.aead_encrypt(KEY, nonce, b"x" * 1024, b"")) == 1040

    def test_gcm_spec_vectors_zero_key(self):
        # frozen vectors: AES-256-GCM with all-zero key and nonce
        zero_key = SymmetricKey(bytes(32))
        out_empty = crypto.aead_encrypt(zero_key, bytes(12), b"", b"")
        assert out_empty.hex() == "530f8afbc74536b9a963b4f1c4cb738b"
        out_block = crypto.aead_encrypt(zero_key, bytes(12), bytes(16), b"")
        assert out_block.hex() == (
            "cea7403d4d606b6e074ec5d3baf39d18" "d0d1c8a799996bf0265b98b5d48ab919"
        )

    def test_every_single_bit_flip_fails_auth(self):
        nonce = crypto.generate_nonce()
        ct = bytearray(crypto.aead_encrypt(KEY, nonce, b"short msg", b"ctx"))
        for byte_idx in range(len(ct)):
            for bit in range(8):
                tampered = bytearray(ct)
                tampered[byte_idx] ^= 1 << bit
                with pytest.raises(AuthenticationError):
                    crypto.aead_decrypt(KEY, nonce, bytes(tampered), b"ctx")

    def test_wrong_aad_fails_auth(self):
        nonce = crypto.generate_nonce()
        ct = crypto.aead_encrypt(KEY, nonce, b"payload", b"aad-one")
        with pytest.raises(AuthenticationError):
            crypto.aead_decrypt(KEY, nonce, ct, b"aad-two")

    def test_too_short_input_is_malformed_not_auth(self):
        with pytest.raises(MalformedInputError):
            crypto.aead_decrypt(KEY, bytes(12), b"\x01" * 15, b"")

    def test_bad_nonce_length_rejected(self):
        with pytest.raises(PreconditionError):
            crypto.aead_encrypt(KEY, b"\x00" * 11, b"x", b"")

    @given(plaintext=st.binary(min_size=0, max_size=2048), aad=st.binary(max_size=64))
    @settings(max_examples=25, deadline=None)
    def test_roundtrip_property(self, plaintext, aad):
        nonce = crypto.generate_nonce()
        ct = crypto.aead_encrypt(KEY, nonce, plaintext, aad)
        assert crypto.aead_decrypt(KEY, nonce, ct, aad) == plaintext


class TestHmac:
    def test_rfc4231_case_1(self):
        tag = crypto.hmac_sha256(b"\x0b" * 20, b"Hi There")
        assert tag.hex() == "b0344c61d8db38535ca8afceaf0bf12b881dc200c9833da726e9376c2e32cff7"

    def test_rfc4231_case_2(self):
        tag = crypto.hmac_sha256(b"Jefe", b"what do ya want for nothing?")
        assert tag.hex() == "5bdcc146bf60754e6a042426089575c75a003f089d2739839dec58b964ec3843"

    def test_sign_length_and_determinism(self):
        t1 = crypto.hmac_sign(KEY, b"data")
        t2 = crypto.hmac_sign(KEY, b"data")
        assert len(t1) == 32 and t1 == t2

    def test_sign_verify_roundtrip(self):
        tag = crypto.hmac_sign(KEY, b"message")
        assert crypto.hmac_verify(KEY, b"message", tag)

    def test_flipped_bit_fails(self):
        tag = bytearray(crypto.hmac_sign(KEY, b"message"))
        for byte_idx in range(len(tag)):
            for bit in range(8):
                bad = bytearray(tag)
                bad[byte_idx] ^= 1 << bit
                assert not crypto.hmac_verify(KEY, b"message", bytes(bad))

    def test_wrong_length_tag_fails(self):
        tag = crypto.hmac_sign(KEY, b"message")
        assert not crypto.hmac_verify(KEY, b"message", tag[:31])
        assert not crypto.hmac_verify(KEY, b"message", tag + b"\x00")


class TestHkdf:
    def test_rfc5869_case_1(self):
        ikm = bytes.fromhex("0b" * 22)
        salt = bytes.fromhex("000102030405060708090a0b0c")
        info = bytes.fromhex("f0f1f2f3f4f5f6f7f8f9")
        prk = crypto.hkdf_extract(salt, ikm)
        assert prk.hex() == "077709362c2e32df0ddc3f0dc47bba6390b6c73bb50f9c3122ec844ad7c2b3e5"
        okm = crypto.hkdf_expand(prk, info, 42)
        assert okm.hex() == (
            "3cb25f25faacd57a90434f64d0362f2a2d2d0a90cf1a5a4c5db02d56ecc4c5bf34007208d5b887185865"
        )

    def test_rfc5869_case_2_long_inputs(self):
        ikm = bytes(range(0x00, 0x50))
        salt = bytes(range(0x60, 0xB0))
        info = bytes(range(0xB0, 0x100))
        okm = crypto.hkdf_expand(crypto.hkdf_extract(salt, ikm), info, 82)
        assert okm.hex() == (
            "b11e398dc80327a1c8e7f78c596a49344f012eda2d4efad8a050cc4c19afa97c"
            "59045a99cac7827271cb41c65e590e09da3275600c2f09b8367793a9aca3db71"
            "cc30c58179ec3e87c14c01d5c1f3434f1d87"
        )

    def test_rfc5869_case_3_empty_salt_and_info(self):
        ikm = bytes.fromhex("0b" * 22)
        prk = crypto.hkdf_extract(b"", ikm)
        assert prk.hex() == "19ef24a32c717b167f33a91d6f648bdf96596776afdb6377ac434c1c293ccb04"
        okm = crypto.hkdf_expand(prk, b"", 42)
        assert okm.hex() == (
            "8da4e775a563c18f715f802a063c5a31b8a11f5c5ee1879ec3454e5f3c738d2d9d201395faa4b61a96c8"
        )

    def test_expand_exact_block(self):
        prk = crypto.hkdf_extract(b"salt", b"ikm")
        assert len(crypto.hkdf_expand(prk, b"info", 32)) == 32

    def test_expand_over_cap_rejected(self):
        prk = crypto.hkdf_extract(b"salt", b"ikm")
        with pytest.raises(PreconditionError):
            crypto.hkdf_expand(prk, b"", 255 * 32 + 1)

    @given(ikm=st.binary(min_size=1, max_size=64), salt=st.binary(max_size=32),
           info=st.binary(max_size=32), length=st.integers(min_value=1, max_value=128))
    @settings(max_examples=30, deadline=None)
    def test_matches_independent_implementation(self, ikm, salt, info, length):
        from cryptography.hazmat.primitives import hashes
        from cryptography.hazmat.primitives.kdf.hkdf import HKDF

        ours = crypto.hkdf_expand(crypto.hkdf_extract(salt, ikm), info, length)
        theirs = HKDF(
            algorithm=hashes.SHA256(), length=length, salt=salt or None, info=info
        ).derive(ikm)
        assert ours == theirs


class TestDerivation:
    def test_next_key_deterministic(self):
        k2a = crypto.derive_next_key(KEY, 1, 2)
        k2b = crypto.derive_next_key(KEY, 1, 2)
        assert k2a.raw == k2b.raw
        assert k2a.role is KeyRole.CONVERSATION

    def test_next_key_differs_across_roots(self):
        other = SymmetricKey(bytes(reversed(range(32))))
        assert crypto.derive_next_key(KEY, 1, 2).raw != crypto.derive_next_key(other, 1, 2).raw

    def test_chain_consistent_across_instances(self):
        # two independent walks from the same root land on identical bytes
        a = KEY
        for version in (1, 2):
            a = crypto.derive_next_key(a, version, version + 1)
        b = crypto.derive_next_key(crypto.derive_next_key(KEY, 1, 2), 2, 3)
        assert a.raw == b.raw

    def test_non_successor_target_rejected(self):
        with pytest.raises(PreconditionError):
            crypto.derive_next_key(KEY, 1, 3)
        with pytest.raises(PreconditionError):
            crypto.derive_next_key(KEY, 2, 2)

    def test_message_key_per_nonce(self):
        seen = set()
        for _ in range(10_000):
            nonce = crypto.generate_nonce()
            seen.add(crypto.derive_message_key(KEY, nonce).raw)
        assert len(seen) == 10_000

    def test_message_key_deterministic(self):
        nonce = crypto.generate_nonce()
        assert crypto.derive_message_key(KEY, nonce).raw == crypto.derive_message_key(KEY, nonce).raw

    def test_hmac_key_properties(self):
        hk = crypto.derive_hmac_key(KEY)
        assert len(hk.raw) == 32 and hk.role is KeyRole.HMAC
        other = SymmetricKey(b"\x07" * 32)
        assert crypto.derive_hmac_key(other).raw != hk.raw

    def test_domain_separation(self):
        # message, hmac, and rotation derivations never collide for the
        # same conversation key
        nonce = crypto.generate_nonce()
        outputs = {
            crypto.derive_message_key(KEY, nonce).raw,
            crypto.derive_hmac_key(KEY).raw,
            crypto.derive_next_key(KEY, 1, 2).raw,
        }
        assert len(outputs) == 3

    def test_derivation_requires_conversation_role(self):
        mk = crypto.derive_message_key(KEY, crypto.generate_nonce())
        with pytest.raises(PreconditionError):
            crypto.derive_message_key(mk, crypto.generate_nonce())


class TestFingerprint:
    def test_format(self):
        import re

        fp = crypto.fingerprint(KEY)
        assert re.fullmatch(r"([0-9A-F]{2}:){7}[0-9A-F]{2}", fp)

    def test_deterministic_and_distinct(self):
        assert crypto.fingerprint(KEY) == crypto.fingerprint(KEY)
        assert crypto.fingerprint(KEY) != crypto.fingerprint(crypto.generate_key())


class TestSecureWipe:
    def test_wipes_bytearray(self):
        buf = bytearray([1, 2, 3])
        crypto.secure_wipe(buf)
        assert buf == bytearray(3)

    def test_empty_is_noop(self):
        buf = bytearray()
        crypto.secure_wipe(buf)
        assert buf == bytearray()

    def test_wipes_key_sized_buffer(self):
        buf = bytearray(range(32))
        crypto.secure_wipe(buf)
        assert buf == bytearray(32)

    def test_wipes_memoryview(self):
        buf = bytearray(b"secret")
        crypto.secure_wipe(memoryview(buf))
        assert buf == bytearray(6)
