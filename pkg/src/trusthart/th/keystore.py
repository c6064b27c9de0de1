"""Keystore with non-extractable ("sensitive") keys.

Ownership is keyed on the enclave code hash; the REE-supplied external id
is carried along but never consulted.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .. import crypto
from ..crypto import Drbg, Measurement
from ..errors import AccessDenied, BadRequest, NonExtractable, NoSuchKey, WrongKeyType
from .messages import EnclaveIdentity

TH_OWNER = "TH"


class KeyKind(enum.IntEnum):
    ECDH = 1
    SIGNING = 2
    SYMMETRIC = 3


_OPS = {
    KeyKind.ECDH: {"ecdh", "export"},
    KeyKind.SIGNING: {"sign", "export"},
    KeyKind.SYMMETRIC: {"export"},
}


@dataclass
class KeyRecord:
    handle: int
    kind: KeyKind
    material: bytes = field(repr=False)
    public: bytes | None
    sensitive: bool
    owner: Measurement | str
    policy: frozenset[str]
    label: str = ""


def _owner(identity: EnclaveIdentity | str) -> Measurement | str:
    return identity if isinstance(identity, str) else identity.code_hash


class Keystore:
    def __init__(self, rng: Drbg, allowed_kinds: dict[Measurement, set[KeyKind]] | None = None):
        self._rng = rng
        self._records: dict[int, KeyRecord] = {}
        self._next = 1
        self.allowed_kinds = allowed_kinds or {}

    def __len__(self):
        return len(self._records)

    def _store(self, identity, kind: KeyKind, material: bytes, public: bytes | None, sensitive: bool,
               label: str = "") -> KeyRecord:
        owner = _owner(identity)
        allowed = self.allowed_kinds.get(owner) if isinstance(owner, Measurement) else None
        if allowed is not None and kind not in allowed:
            raise AccessDenied(f"policy forbids {kind.name} keys for this enclave")
        ops = set(_OPS[kind])
        if sensitive:
            ops.discard("export")
        record = KeyRecord(self._next, kind, material, public, sensitive, owner, frozenset(ops), label)
        self._records[record.handle] = record
        self._next += 1
        return record

    def generate(self, identity, kind: KeyKind, sensitive: bool) -> tuple[int, bytes | None]:
        if kind is KeyKind.ECDH:
            kp = crypto.ecdh_keygen(self._rng)
            material, public = kp.private, kp.public
        elif kind is KeyKind.SIGNING:
            kp = crypto.SigningKeypair.from_private(self._rng.generate(32))
            material, public = kp.private, kp.public
        else:
            material, public = self._rng.generate(32), None
        record = self._store(identity, kind, material, public, sensitive)
        return record.handle, public

    def import_key(self, identity, kind: KeyKind, material: bytes, sensitive: bool) -> tuple[int, bytes | None]:
        if len(material) != 32:
            raise BadRequest("key material must be 32 bytes")
        if kind is KeyKind.ECDH:
            public = crypto.EcdhKeypair.from_private(material).public
        elif kind is KeyKind.SIGNING:
            public = crypto.SigningKeypair.from_private(material).public
        else:
            public = None
        record = self._store(identity, kind, material, public, sensitive)
        return record.handle, public

    def add_platform_key(self, label: str, keypair: crypto.SigningKeypair) -> int:
        """Register a TH-owned, non-extractable signing key (e.g. the attestation key)."""
        record = self._store(TH_OWNER, KeyKind.SIGNING, keypair.private, keypair.public, True, label)
        return record.handle

    def get(self, identity, handle: int) -> KeyRecord:
        record = self._records.get(handle)
        if record is None:
            raise NoSuchKey(f"no key with handle {handle}")
        if record.owner != _owner(identity):
            raise AccessDenied(f"key {handle} belongs to another owner")
        return record

    def export(self, identity, handle: int) -> bytes:
        record = self.get(identity, handle)
        if record.sensitive or "export" not in record.policy:
            raise NonExtractable(f"key {handle} is sensitive")
        return record.material

    def use_ecdh(self, identity, handle: int, peer_pub: bytes) -> bytes:
        record = self.get(identity, handle)
        if record.kind is not KeyKind.ECDH:
            raise WrongKeyType(f"key {handle} is {record.kind.name}, not ECDH")
        return crypto.ecdh_agree(record.material, peer_pub)

    def sign(self, identity, handle: int, msg: bytes) -> bytes:
        record = self.get(identity, handle)
        if record.kind is not KeyKind.SIGNING:
            raise WrongKeyType(f"key {handle} is {record.kind.name}, not signing")
        return crypto.sign(crypto.SigningKeypair(record.material, record.public), msg)

    def sensitive_materials(self) -> list[bytes]:
        return [r.material for r in self._records.values() if r.sensitive]

    def records(self) -> list[KeyRecord]:
        return list(self._records.values())
