"""Three-layer attestation report and its verifier.

Wire layout (all fields concatenated, no padding)::

    sha_sm(64) pub_sm(32) sgn_d(64)            layer i,   signed by the device key
    sha_th(64) pub_th(32) sgn_sm(64)           layer ii,  signed by the SM key
    sha_enclave(64) data_len(2, LE) data sgn_th(64)   layer iii, signed by the TH key
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass

from .. import crypto
from ..boot import BootCredentials
from ..crypto import Measurement
from ..errors import DataTooLarge, MalformedReport
from .messages import EnclaveIdentity

MAX_USER_DATA = 1024
LAYER_SIZE = 64 + 32 + 64
FIXED_SIZE = 2 * LAYER_SIZE + 64 + 2 + 64


class Layer(str, enum.Enum):
    DEVICE = "i"
    SM = "ii"
    TH = "iii"


def encoded_size(data_len: int) -> int:
    return FIXED_SIZE + data_len


@dataclass(frozen=True)
class AttestationReport:
    sha_sm: bytes
    pub_sm: bytes
    sgn_d: bytes
    sha_th: bytes
    pub_th: bytes
    sgn_sm: bytes
    sha_enclave: bytes
    data: bytes
    sgn_th: bytes

    @staticmethod
    def th_message(sha_enclave: bytes, data: bytes) -> bytes:
        return sha_enclave + struct.pack("<H", len(data)) + data

    def encode(self) -> bytes:
        return (self.sha_sm + self.pub_sm + self.sgn_d
                + self.sha_th + self.pub_th + self.sgn_sm
                + self.th_message(self.sha_enclave, self.data) + self.sgn_th)

    @classmethod
    def decode(cls, blob: bytes) -> "AttestationReport":
        if len(blob) < FIXED_SIZE:
            raise MalformedReport(f"report too short: {len(blob)} bytes")
        (data_len,) = struct.unpack_from("<H", blob, 2 * LAYER_SIZE + 64)
        if data_len > MAX_USER_DATA:
            raise MalformedReport(f"data_len {data_len} exceeds {MAX_USER_DATA}")
        if len(blob) != encoded_size(data_len):
            raise MalformedReport(f"expected {encoded_size(data_len)} bytes, got {len(blob)}")
        fields, pos = [], 0
        for size in (64, 32, 64, 64, 32, 64, 64):
            fields.append(bytes(blob[pos:pos + size]))
            pos += size
        pos += 2
        data = bytes(blob[pos:pos + data_len])
        return cls(*fields, data, bytes(blob[pos + data_len:]))


def build_report(identity: EnclaveIdentity, user_data: bytes, creds: BootCredentials) -> AttestationReport:
    if len(user_data) > MAX_USER_DATA:
        raise DataTooLarge(f"user data of {len(user_data)} bytes exceeds {MAX_USER_DATA}")
    sha_enclave = identity.code_hash.digest
    sm_end, th_end = creds.sm_endorsement, creds.th_endorsement
    return AttestationReport(
        sm_end.subject_hash.digest, sm_end.subject_pub, sm_end.signature,
        th_end.subject_hash.digest, th_end.subject_pub, th_end.signature,
        sha_enclave, bytes(user_data),
        crypto.sign(creds.th_keypair, AttestationReport.th_message(sha_enclave, user_data)),
    )


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    layer: Layer | None = None
    reason: str = ""

    def __bool__(self):
        return self.accepted


def _digest(value) -> bytes:
    return value.digest if isinstance(value, Measurement) else bytes(value)


def verify_report(blob: bytes, device_pub: bytes, expected_sm_hash, expected_th_hash, expected_enclave_hash,
                  expected_data: bytes | None = None) -> Verdict:
    """Check every signature and expected value; the first failing layer is reported."""
    r = AttestationReport.decode(blob)
    if not crypto.verify(device_pub, r.sha_sm + r.pub_sm, r.sgn_d):
        return Verdict(False, Layer.DEVICE, "device signature invalid")
    if r.sha_sm != _digest(expected_sm_hash):
        return Verdict(False, Layer.DEVICE, "SM hash mismatch")
    if not crypto.verify(r.pub_sm, r.sha_th + r.pub_th, r.sgn_sm):
        return Verdict(False, Layer.SM, "SM signature invalid")
    if r.sha_th != _digest(expected_th_hash):
        return Verdict(False, Layer.SM, "TH hash mismatch")
    if not crypto.verify(r.pub_th, AttestationReport.th_message(r.sha_enclave, r.data), r.sgn_th):
        return Verdict(False, Layer.TH, "TH signature invalid")
    if r.sha_enclave != _digest(expected_enclave_hash):
        return Verdict(False, Layer.TH, "enclave hash mismatch")
    if expected_data is not None and r.data != expected_data:
        return Verdict(False, Layer.TH, "user data mismatch")
    return Verdict(True)
