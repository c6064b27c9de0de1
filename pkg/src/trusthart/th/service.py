"""The Trusted Hart runtime: channel dispatcher and service routing."""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from typing import Callable

from ..boot import BootCredentials
from ..crypto import Drbg, Measurement
from ..errors import BadRequest, ChannelUnknown, MemoryFault, SimError, AccessDenied
from ..machine import Machine, Perm, Region
from .keystore import KeyKind, Keystore
from .messages import (
    HEADER, RESPONSE_OFFSET, SM_CHANNEL, EnclaveIdentity, MsgKind, Status, ThMessage,
)
from .report import build_report
from .spm import SecurePeripheralManager
from .storage import SealedBlob, SealedStorage

log = logging.getLogger(__name__)

_HANDLE = struct.Struct("<I")


@dataclass
class Channel:
    eid: int
    identity: EnclaveIdentity
    buffer: Region
    last_seq: int = 0


class TrustedHart:
    def __init__(self, machine: Machine, creds: BootCredentials, *, peripherals=(),
                 keystore_policy: dict[Measurement, set[KeyKind]] | None = None,
                 costs: dict[MsgKind, int] | None = None):
        self.machine = machine
        self.creds = creds.for_th()
        rng = Drbg(creds.storage_key).fork(b"TH-runtime")
        self.keystore = Keystore(rng.fork(b"keystore"), keystore_policy)
        self.attestation_key = self.keystore.add_platform_key("th-attestation", creds.th_keypair)
        self.storage = SealedStorage(creds.storage_key, machine.counter("th-rollback"), rng.fork(b"seal"))
        self.spm = SecurePeripheralManager(peripherals)
        self.costs = dict(costs or {})
        self.channels: dict[int, Channel] = {}
        self.busy_until = 0
        self.busy_ms = 0
        self.traffic: list[bytes] = []
        self.notify: Callable[[int], None] | None = None
        self._inflight: list[tuple[int, int, ThMessage]] = []
        self._sm_seq = 0

    @property
    def hart(self):
        return self.machine.trusted_hart

    # -- channel registry ----------------------------------------------------------------

    def register_channel(self, eid: int, identity: EnclaveIdentity, buffer: Region) -> None:
        if eid == SM_CHANNEL:
            raise ValueError("channel 0 is reserved for the SM")
        self.channels[eid] = Channel(eid, identity, buffer)
        self.machine.log("th-channel-open", f"eid={eid} hash={identity.code_hash.hex()[:16]}", hart=self.hart.id)

    def drop_channel(self, eid: int) -> None:
        self.channels.pop(eid, None)
        self._inflight = [item for item in self._inflight if item[1] != eid]
        self.machine.log("th-channel-drop", f"eid={eid}", hart=self.hart.id)

    # -- memory through the TH's own PMP view --------------------------------------------

    def _read(self, addr: int, length: int) -> bytes:
        if not self.machine.pmp_check(self.hart, addr, length, Perm.R):
            raise MemoryFault(f"TH read fault at {addr:#x}")
        return self.machine.memory.read(addr, length)

    def _write(self, addr: int, data: bytes) -> None:
        if not self.machine.pmp_check(self.hart, addr, len(data), Perm.W):
            raise MemoryFault(f"TH write fault at {addr:#x}")
        self.machine.memory.write(addr, data)

    # -- dispatch ------------------------------------------------------------------------

    def dispatch(self, msg: ThMessage, identity: EnclaveIdentity | None = None) -> ThMessage:
        """Route one request and return its response; status leaves PENDING exactly once."""
        if msg.channel == SM_CHANNEL:
            return self._dispatch_sm(msg)
        channel = self.channels.get(msg.channel)
        if channel is None:
            raise ChannelUnknown(f"no channel {msg.channel}")
        if identity is not None and identity != channel.identity:
            return msg.fail(AccessDenied("identity does not match the channel"))
        if msg.status is not Status.PENDING:
            return msg.fail(BadRequest("request is not pending"))
        if msg.seq <= channel.last_seq:
            return msg.fail(BadRequest(f"stale sequence number {msg.seq} (last {channel.last_seq})"))
        channel.last_seq = msg.seq
        try:
            return msg.respond(self._handle(channel.identity, msg))
        except SimError as exc:
            return msg.fail(exc)

    def _handle(self, identity: EnclaveIdentity, msg: ThMessage) -> bytes:
        p = msg.payload
        if msg.kind is MsgKind.KEY_GEN:
            if len(p) != 2:
                raise BadRequest("KEY_GEN payload is kind(1) sensitive(1)")
            handle, public = self.keystore.generate(identity, _kind(p[0]), bool(p[1]))
            return _HANDLE.pack(handle) + (public or b"")
        if msg.kind is MsgKind.KEY_IMPORT:
            if len(p) != 34:
                raise BadRequest("KEY_IMPORT payload is kind(1) sensitive(1) material(32)")
            handle, public = self.keystore.import_key(identity, _kind(p[0]), p[2:], bool(p[1]))
            return _HANDLE.pack(handle) + (public or b"")
        if msg.kind is MsgKind.KEY_USE_ECDH:
            if len(p) < _HANDLE.size:
                raise BadRequest("KEY_USE_ECDH payload is handle(4) peer_pub(32)")
            (handle,) = _HANDLE.unpack_from(p)
            return self.keystore.use_ecdh(identity, handle, p[_HANDLE.size:])
        if msg.kind is MsgKind.KEY_EXPORT:
            if len(p) != _HANDLE.size:
                raise BadRequest("KEY_EXPORT payload is handle(4)")
            return self.keystore.export(identity, _HANDLE.unpack(p)[0])
        if msg.kind is MsgKind.PERIPHERAL_REQ:
            if len(p) != 2:
                raise BadRequest("PERIPHERAL_REQ payload is peripheral id(2)")
            try:
                decision = self.spm.request(identity, struct.unpack("<H", p)[0])
            except KeyError as exc:
                raise BadRequest(str(exc)) from exc
            return bytes([1 if decision else 0])
        if msg.kind is MsgKind.SEAL:
            return self.storage.seal(identity, p).encode()
        if msg.kind is MsgKind.UNSEAL:
            return self.storage.unseal(identity, SealedBlob.decode(p))
        raise BadRequest(f"{msg.kind.name} is not accepted on enclave channels")

    def _dispatch_sm(self, msg: ThMessage) -> ThMessage:
        if msg.kind is not MsgKind.ATTEST or len(msg.payload) < 64:
            return msg.fail(BadRequest("SM channel carries ATTEST(code_hash, data) only"))
        identity = EnclaveIdentity(Measurement(msg.payload[:64]))
        try:
            report = build_report(identity, msg.payload[64:], self.creds)
        except SimError as exc:
            return msg.fail(exc)
        response = msg.respond(report.encode())
        self.traffic += [msg.encode(), response.encode()]
        return response

    # -- shared-buffer service loop ------------------------------------------------------

    def on_ipi(self) -> None:
        """Handle delivered IPIs: scan channels for new requests and queue responses."""
        delivered = self.machine.take_ipis(self.hart)
        if not delivered:
            return
        for eid in sorted(self.channels):
            self.service(eid)

    def service(self, eid: int) -> ThMessage | None:
        channel = self.channels[eid]
        raw = self._read(channel.buffer.base, RESPONSE_OFFSET)
        if raw[1] != Status.PENDING or HEADER.unpack_from(raw)[3] <= channel.last_seq:
            return None
        self.traffic.append(raw[:HEADER.size + HEADER.unpack_from(raw)[5]])
        try:
            request = ThMessage.decode(eid, raw)
        except BadRequest as exc:
            request = ThMessage(eid, HEADER.unpack_from(raw)[3], MsgKind.KEY_GEN)
            response = request.fail(exc)
        else:
            response = self.dispatch(request)
        cost = self.costs.get(request.kind, 0) if response.status is Status.DONE else 0
        start = max(self.machine.clock.now, self.busy_until)
        self.busy_until = start + cost
        self.busy_ms += cost
        self._inflight.append((self.busy_until, eid, response))
        self.machine.log("th-dispatch", f"eid={eid} seq={request.seq} {request.kind.name} "
                         f"ready_at={self.busy_until}", hart=self.hart.id)
        return response

    def ready_time(self, eid: int) -> int | None:
        times = [t for t, e, _ in self._inflight if e == eid]
        return min(times) if times else None

    def run_until(self, t: int) -> list[int]:
        """Publish every response completed by virtual time ``t`` into its channel buffer."""
        done = sorted((item for item in self._inflight if item[0] <= t), key=lambda item: item[0])
        self._inflight = [item for item in self._inflight if item[0] > t]
        published = []
        for ready_at, eid, response in done:
            channel = self.channels.get(eid)
            if channel is None:
                continue
            encoded = ThMessage(eid, response.seq, response.kind, response.payload, response.status,
                                response.error, ready_at).encode()
            self._write(channel.buffer.base + RESPONSE_OFFSET, encoded)
            self.traffic.append(encoded)
            published.append(eid)
            if self.notify is not None:
                self.notify(eid)
        return published

    def sensitive_materials(self) -> list[bytes]:
        return self.keystore.sensitive_materials()


def _kind(value: int) -> KeyKind:
    try:
        return KeyKind(value)
    except ValueError as exc:
        raise BadRequest(f"unknown key kind {value}") from exc
