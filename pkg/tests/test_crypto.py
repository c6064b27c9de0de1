import hashlib

import pytest
from hypothesis import given, settings, strategies as st

from trusthart import crypto
from trusthart.crypto import Drbg, Measurement, measure
from trusthart.errors import InvalidImage, InvalidPoint

from conftest import IMAGES

# sha512sum over the fixture images, frozen
IMAGE_DIGEST_PREFIXES = {
    "enclave.bin": "4e2366c5fbd3eba5c277",
    "fsbl.bin": "7781290cf11e856a2502",
    "sm.bin": "c5cd3601c1a1887494e0",
    "th.bin": "8356939bfecb444c5343",
}

# RFC 8032, test 1
ED_SECRET = bytes.fromhex("9d61b19deffd5a60ba844af492ec2cc44449c5697b326919703bac031cae7f60")
ED_PUBLIC = bytes.fromhex("d75a980182b10ab7d54bfed3c964073a0ee172f3daa62325af021a68f707511a")
ED_SIG_EMPTY = bytes.fromhex(
    "e5564300c360ac729086e2cc806e828a84877f1eb8e5d974d873e065224901555fb8821590a33bacc61e39701cf9b46bd25bf5f0595bbe24655141438e7a100b")

# generated with `openssl genpkey -algorithm X25519` and `openssl pkeyutl -derive`
X_A_PRIV = bytes.fromhex("a04a15082d31e68cc36dc4db8e45615e21271ce893313707ad26e9ea677c8953")
X_A_PUB = bytes.fromhex("ea0ad44aa52bb046691fd3ff10dda5efcdc42be5e2b55c268bc0b0144e39b361")
X_B_PUB = bytes.fromhex("68e4a77a0709a6d7b9ea133d562d4551bbf7bcc15c754c6d385224c38ce6f562")
X_SHARED = bytes.fromhex("f2e7101fd6bc20e34b7bf1d9befa0eaa964120f977c09626285dee8a55a2d51f")


@pytest.mark.parametrize("name,prefix", sorted(IMAGE_DIGEST_PREFIXES.items()))
def test_measure_matches_sha512sum(name, prefix):
    m = measure((IMAGES / name).read_bytes())
    assert m.hex().startswith(prefix)
    assert len(m.digest) == crypto.MEASUREMENT_SIZE


def test_measure_abc_vector():
    assert measure(b"abc").hex().startswith("ddaf35a193617abacc417349ae204131")


def test_measure_rejects_empty():
    with pytest.raises(InvalidImage):
        measure(b"")


def test_measurement_hex_roundtrip():
    m = measure(b"x")
    assert Measurement.fromhex(m.hex()) == m
    assert bytes(m) == hashlib.sha512(b"x").digest()
    with pytest.raises(ValueError):
        Measurement(b"short")


def test_ed25519_known_vector():
    kp = crypto.SigningKeypair.from_private(ED_SECRET)
    assert kp.public == ED_PUBLIC
    assert crypto.sign(kp, b"") == ED_SIG_EMPTY
    assert crypto.verify(ED_PUBLIC, b"", ED_SIG_EMPTY)


def test_x25519_openssl_vector():
    assert crypto.EcdhKeypair.from_private(X_A_PRIV).public == X_A_PUB
    assert crypto.ecdh_agree(X_A_PRIV, X_B_PUB) == X_SHARED


def test_ecdh_rejects_bad_points():
    with pytest.raises(InvalidPoint):
        crypto.ecdh_agree(X_A_PRIV, b"\x01" * 31)
    with pytest.raises(InvalidPoint):
        crypto.ecdh_agree(X_A_PRIV, bytes(32))  # low-order point


def test_ecdh_agreement_symmetric():
    rng = Drbg.from_int(5)
    a, b = crypto.ecdh_keygen(rng), crypto.ecdh_keygen(rng)
    assert crypto.ecdh_agree(a.private, b.public) == crypto.ecdh_agree(b.private, a.public)


def test_signature_soundness_1000_pairs():
    rng = Drbg.from_int(11)
    pairs = [(crypto.keygen_sign(rng, b"k%d" % i), rng.generate(40)) for i in range(1000)]
    for kp, msg in pairs:
        assert crypto.verify(kp.public, msg, crypto.sign(kp, msg))


def test_single_bit_corruptions_all_fail():
    rng = Drbg.from_int(12)
    kp = crypto.keygen_sign(rng, b"bits")
    msg = rng.generate(64)
    sig = crypto.sign(kp, msg)
    blob = msg + sig
    failures = 0
    for i in range(1000):
        bit = i % (len(blob) * 8)
        corrupted = bytearray(blob)
        corrupted[bit // 8] ^= 1 << (bit % 8)
        failures += not crypto.verify(kp.public, bytes(corrupted[:64]), bytes(corrupted[64:]))
    assert failures == 1000


def test_verify_is_total():
    kp = crypto.keygen_sign(Drbg.from_int(1), b"x")
    assert not crypto.verify(kp.public, b"m", b"short")
    assert not crypto.verify(b"bad", b"m", bytes(64))


def test_drbg_determinism_and_separation():
    a, b = Drbg.from_int(7), Drbg.from_int(7)
    assert a.generate(48) == b.generate(48)
    assert a.derive(b"x") == Drbg.from_int(7).derive(b"x")
    assert a.derive(b"x") != a.derive(b"y")
    assert a.fork(b"x").seed != a.fork(b"y").seed
    assert Drbg.from_int(7).generate(16) != Drbg.from_int(8).generate(16)


def test_keygen_sign_is_label_bound():
    rng = Drbg.from_int(3)
    assert crypto.keygen_sign(rng, b"a").public == crypto.keygen_sign(Drbg.from_int(3), b"a").public
    assert crypto.keygen_sign(rng, b"a").public != crypto.keygen_sign(rng, b"b").public


def test_private_key_hidden_from_repr():
    kp = crypto.SigningKeypair.from_private(ED_SECRET)
    assert ED_SECRET.hex() not in repr(kp)


@settings(max_examples=200, deadline=None)
@given(st.binary(min_size=0, max_size=256), st.integers(0, 2**32))
def test_sign_verify_property(msg, seed):
    kp = crypto.keygen_sign(Drbg.from_int(seed), b"p")
    sig = crypto.sign(kp, msg)
    assert crypto.verify(kp.public, msg, sig)
    assert not crypto.verify(kp.public, msg + b"\x00", sig)
