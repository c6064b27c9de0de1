"""Channel message envelope shared by enclaves, the SM and the TH.

Each channel buffer is split in two halves: the request slot at offset 0
and the response slot at offset ``RESPONSE_OFFSET``. Both hold a
:class:`ThMessage` encoded as a fixed header followed by the payload.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, replace

from .. import errors
from ..crypto import Measurement

HEADER = struct.Struct("<BBHIQI")  # kind, status, error, seq, ready_at, length
RESPONSE_OFFSET = 2048
MAX_PAYLOAD = RESPONSE_OFFSET - HEADER.size
SM_CHANNEL = 0
MAX_EXTERNAL_ID = 64


class MsgKind(enum.IntEnum):
    KEY_GEN = 1
    KEY_IMPORT = 2
    KEY_USE_ECDH = 3
    KEY_EXPORT = 4
    ATTEST = 5
    PERIPHERAL_REQ = 6
    SEAL = 7
    UNSEAL = 8


class Status(enum.IntEnum):
    EMPTY = 0
    PENDING = 1
    DONE = 2
    ERROR = 3


class ErrorCode(enum.IntEnum):
    NONE = 0
    BAD_REQUEST = 1
    ACCESS_DENIED = 2
    NON_EXTRACTABLE = 3
    WRONG_KEY_TYPE = 4
    INVALID_POINT = 5
    DATA_TOO_LARGE = 6
    TAMPER_DETECTED = 7
    ROLLBACK_DETECTED = 8
    NO_SUCH_KEY = 9


_ERRORS = {
    ErrorCode.BAD_REQUEST: errors.BadRequest,
    ErrorCode.ACCESS_DENIED: errors.AccessDenied,
    ErrorCode.NON_EXTRACTABLE: errors.NonExtractable,
    ErrorCode.WRONG_KEY_TYPE: errors.WrongKeyType,
    ErrorCode.INVALID_POINT: errors.InvalidPoint,
    ErrorCode.DATA_TOO_LARGE: errors.DataTooLarge,
    ErrorCode.TAMPER_DETECTED: errors.TamperDetected,
    ErrorCode.ROLLBACK_DETECTED: errors.RollbackDetected,
    ErrorCode.NO_SUCH_KEY: errors.NoSuchKey,
}


def error_code(exc: Exception) -> ErrorCode:
    for code, cls in _ERRORS.items():
        if isinstance(exc, cls):
            return code
    return ErrorCode.BAD_REQUEST


@dataclass(frozen=True)
class EnclaveIdentity:
    """Identity the SM hands to the TH; never supplied by the enclave itself."""

    code_hash: Measurement
    external_id: str = ""

    def __post_init__(self):
        if len(self.external_id.encode()) > MAX_EXTERNAL_ID:
            raise ValueError(f"external_id longer than {MAX_EXTERNAL_ID} bytes")


@dataclass(frozen=True)
class ThMessage:
    channel: int
    seq: int
    kind: MsgKind
    payload: bytes = b""
    status: Status = Status.PENDING
    error: ErrorCode = ErrorCode.NONE
    ready_at: int = 0

    def __post_init__(self):
        if len(self.payload) > MAX_PAYLOAD:
            raise errors.DataTooLarge(f"payload of {len(self.payload)} bytes exceeds {MAX_PAYLOAD}")

    def encode(self) -> bytes:
        return HEADER.pack(self.kind, self.status, self.error, self.seq, self.ready_at,
                           len(self.payload)) + self.payload

    @classmethod
    def decode(cls, channel: int, data: bytes) -> "ThMessage":
        if len(data) < HEADER.size:
            raise errors.BadRequest("short message header")
        kind, status, error, seq, ready_at, length = HEADER.unpack_from(data)
        if length > MAX_PAYLOAD or HEADER.size + length > len(data):
            raise errors.BadRequest("message length field out of range")
        try:
            return cls(channel, seq, MsgKind(kind), bytes(data[HEADER.size:HEADER.size + length]),
                       Status(status), ErrorCode(error), ready_at)
        except ValueError as exc:
            raise errors.BadRequest(str(exc)) from exc

    def respond(self, payload: bytes = b"", ready_at: int = 0) -> "ThMessage":
        return replace(self, payload=payload, status=Status.DONE, error=ErrorCode.NONE, ready_at=ready_at)

    def fail(self, exc: Exception, ready_at: int = 0) -> "ThMessage":
        return replace(self, payload=str(exc).encode()[:200], status=Status.ERROR, error=error_code(exc),
                       ready_at=ready_at)

    def raise_for_status(self) -> "ThMessage":
        if self.status is Status.ERROR:
            raise _ERRORS.get(self.error, errors.BadRequest)(self.payload.decode(errors="replace"))
        return self
