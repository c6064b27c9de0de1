"""Sealed storage with rollback protection.

Blob layout: version(8, LE) | owner code hash(64) | nonce(12) | ciphertext+tag.
Version and owner are bound as associated data; the rollback floor is the
current value of a TH-owned monotonic counter.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305

from ..crypto import Drbg, Measurement
from ..errors import AccessDenied, RollbackDetected, TamperDetected
from ..machine import MonotonicCounter
from .messages import EnclaveIdentity

NONCE_SIZE = 12
TAG_SIZE = 16
_HEAD = struct.Struct("<Q64s12s")


@dataclass(frozen=True)
class SealedBlob:
    version: int
    owner: bytes
    nonce: bytes
    ciphertext: bytes

    @property
    def tag(self) -> bytes:
        return self.ciphertext[-TAG_SIZE:]

    def encode(self) -> bytes:
        return _HEAD.pack(self.version, self.owner, self.nonce) + self.ciphertext

    @classmethod
    def decode(cls, data: bytes) -> "SealedBlob":
        if len(data) < _HEAD.size + TAG_SIZE:
            raise TamperDetected("sealed blob truncated")
        version, owner, nonce = _HEAD.unpack_from(data)
        return cls(version, owner, nonce, bytes(data[_HEAD.size:]))


class SealedStorage:
    def __init__(self, key: bytes, counter: MonotonicCounter, rng: Drbg):
        self._aead = ChaCha20Poly1305(key)
        self.counter = counter
        self._rng = rng

    @property
    def floor(self) -> int:
        return self.counter.read()

    def raise_floor(self, to: int) -> int:
        while self.counter.read() < to:
            self.counter.increment()
        return self.counter.read()

    @staticmethod
    def _aad(version: int, owner: bytes) -> bytes:
        return struct.pack("<Q", version) + owner

    def seal(self, identity: EnclaveIdentity, plaintext: bytes) -> SealedBlob:
        version = self.floor
        owner = identity.code_hash.digest
        nonce = self._rng.generate(NONCE_SIZE)
        return SealedBlob(version, owner, nonce, self._aead.encrypt(nonce, bytes(plaintext), self._aad(version, owner)))

    def unseal(self, identity: EnclaveIdentity, blob: SealedBlob) -> bytes:
        if blob.owner != identity.code_hash.digest:
            raise AccessDenied("blob sealed for another enclave")
        try:
            plaintext = self._aead.decrypt(blob.nonce, blob.ciphertext, self._aad(blob.version, blob.owner))
        except InvalidTag as exc:
            raise TamperDetected("authentication tag mismatch") from exc
        if blob.version < self.floor:
            raise RollbackDetected(f"blob version {blob.version} below floor {self.floor}")
        return plaintext


def owner_of(blob: SealedBlob) -> Measurement:
    return Measurement(blob.owner)
