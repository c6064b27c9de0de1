"""Deterministic cryptographic primitives.

Measurements are SHA-512 digests, signatures are Ed25519 and key agreement
is X25519. Every "fresh" key is drawn from a seedable :class:`Drbg` so two
runs with the same seed produce byte-identical artifacts.
"""

from __future__ import annotations

import hashlib
import hmac
import os
from dataclasses import dataclass, field

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import Ed25519PrivateKey, Ed25519PublicKey
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import InvalidImage, InvalidPoint

MEASUREMENT_SIZE = 64
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
SEED_SIZE = 32


@dataclass(frozen=True)
class Measurement:
    digest: bytes

    def __post_init__(self):
        if len(self.digest) != MEASUREMENT_SIZE:
            raise ValueError(f"measurement must be {MEASUREMENT_SIZE} bytes, got {len(self.digest)}")

    def hex(self) -> str:
        return self.digest.hex()

    @classmethod
    def fromhex(cls, text: str) -> "Measurement":
        return cls(bytes.fromhex(text.strip()))

    def __bytes__(self):
        return self.digest

    def __repr__(self):
        return f"Measurement({self.digest[:8].hex()}...)"


def measure(image: bytes) -> Measurement:
    if not image:
        raise InvalidImage("cannot measure an empty image")
    return Measurement(hashlib.sha512(bytes(image)).digest())


class Drbg:
    """Labeled, seedable randomness source.

    ``derive`` is a pure function of (seed, label); ``generate`` walks a
    stream and therefore mutates the generator.
    """

    def __init__(self, seed: bytes):
        if len(seed) != SEED_SIZE:
            raise ValueError(f"seed must be {SEED_SIZE} bytes")
        self._seed = bytes(seed)
        self._counter = 0
        self._buffer = b""

    @classmethod
    def from_int(cls, value: int) -> "Drbg":
        return cls(value.to_bytes(SEED_SIZE, "big"))

    @classmethod
    def from_entropy(cls) -> "Drbg":
        return cls(os.urandom(SEED_SIZE))

    @property
    def seed(self) -> bytes:
        return self._seed

    def derive(self, label: bytes, length: int = SEED_SIZE) -> bytes:
        return HKDF(algorithm=hashes.SHA512(), length=length, salt=None, info=bytes(label)).derive(self._seed)

    def fork(self, label: bytes) -> "Drbg":
        return Drbg(self.derive(label))

    def generate(self, length: int) -> bytes:
        while len(self._buffer) < length:
            block = hmac.new(self._seed, b"stream" + self._counter.to_bytes(8, "big"), hashlib.sha256).digest()
            self._counter += 1
            self._buffer += block
        out, self._buffer = self._buffer[:length], self._buffer[length:]
        return out


@dataclass(frozen=True)
class SigningKeypair:
    private: bytes = field(repr=False)
    public: bytes

    @classmethod
    def from_private(cls, private: bytes) -> "SigningKeypair":
        key = Ed25519PrivateKey.from_private_bytes(private)
        return cls(bytes(private), key.public_key().public_bytes_raw())


@dataclass(frozen=True)
class EcdhKeypair:
    private: bytes = field(repr=False)
    public: bytes

    @classmethod
    def from_private(cls, private: bytes) -> "EcdhKeypair":
        key = X25519PrivateKey.from_private_bytes(private)
        return cls(bytes(private), key.public_key().public_bytes_raw())


def keygen_sign(rand: Drbg, label: bytes) -> SigningKeypair:
    return SigningKeypair.from_private(rand.derive(b"sign:" + bytes(label)))


def sign(keypair: SigningKeypair, msg: bytes) -> bytes:
    return Ed25519PrivateKey.from_private_bytes(keypair.private).sign(bytes(msg))


def verify(pub: bytes, msg: bytes, sig: bytes) -> bool:
    if len(pub) != PUBLIC_KEY_SIZE or len(sig) != SIGNATURE_SIZE:
        return False
    try:
        Ed25519PublicKey.from_public_bytes(bytes(pub)).verify(bytes(sig), bytes(msg))
    except (InvalidSignature, ValueError):
        return False
    return True


def ecdh_keygen(rand: Drbg) -> EcdhKeypair:
    return EcdhKeypair.from_private(rand.generate(32))


def ecdh_agree(private: bytes, peer_pub: bytes) -> bytes:
    if len(peer_pub) != PUBLIC_KEY_SIZE:
        raise InvalidPoint(f"peer public key must be {PUBLIC_KEY_SIZE} bytes, got {len(peer_pub)}")
    try:
        return X25519PrivateKey.from_private_bytes(bytes(private)).exchange(
            X25519PublicKey.from_public_bytes(bytes(peer_pub))
        )
    except ValueError as exc:
        # all-zero shared secret: low-order peer point
        raise InvalidPoint(str(exc)) from exc
