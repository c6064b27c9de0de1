"""The Secure Monitor: enclave lifecycle, PMP zone management and scheduling.

Two PMP modes are supported. In ``strict`` mode every zone of every live
enclave is programmed into every normal hart's register file (four
registers per enclave), so the register count caps the number of live
enclaves. In ``cache`` mode the SM keeps a zone map in memory and treats
the register file as an LRU cache that is refilled on protection faults.
"""

from __future__ import annotations

import enum
import logging
from collections import OrderedDict
from dataclasses import dataclass
from typing import Any

from .boot import BootCredentials
from .crypto import Measurement, measure
from .errors import (
    BadState, DataTooLarge, EnclaveDestroyed, NoRequest, NoSuchEnclave, PoolExhausted, ResourceExhausted,
)
from .machine import KIB, Hart, Machine, Mode, Outcome, Perm, PmpEntry, Region
from .th.messages import HEADER, RESPONSE_OFFSET, SM_CHANNEL, EnclaveIdentity, MsgKind, Status, ThMessage
from .th.report import MAX_USER_DATA
from .th.service import TrustedHart
from .workloads.program import (
    Attest, Compute, EnclaveContext, EnclaveProgram, OCall, PollTh, Return, ThRequest, resolve,
)

log = logging.getLogger(__name__)

REE = "REE"
TH = "TH"
REGISTERS_PER_ZONE = 2
DEFAULT_ENCLAVE_SIZE = 64 * KIB


class PmpMode(enum.Enum):
    STRICT = "strict"
    CACHE = "cache"


class EnclaveState(enum.Enum):
    CREATED = "created"
    RUNNING = "running"
    AWAITING_TH = "awaiting_th"
    STOPPED = "stopped"
    DESTROYED = "destroyed"


class SbiCall(enum.IntEnum):
    CREATE = 0x01
    ENTER = 0x02
    RESUME = 0x03
    DESTROY = 0x04
    ATTEST = 0x05
    IPI_SEND = 0x06


class RefillResult(enum.Enum):
    REFILLED = "refilled"
    DENIED = "denied"


@dataclass(frozen=True)
class PmpZone:
    base: int
    length: int
    perms: Perm
    owner: str
    kind: str
    registers_needed: int = REGISTERS_PER_ZONE

    @property
    def end(self) -> int:
        return self.base + self.length

    def contains(self, addr: int, length: int = 1) -> bool:
        return self.base <= addr and addr + length <= self.end

    @property
    def key(self) -> tuple[int, int]:
        return (self.base, self.length)


class ExitKind(enum.Enum):
    COMPLETED = "completed"
    OCALL = "ocall"
    PREEMPTED = "preempted"


@dataclass(frozen=True)
class ExitEvent:
    kind: ExitKind
    time: int
    result: Any = None
    ocall: str = ""
    payload: Any = None
    reason: str = ""


@dataclass
class Invocation:
    steps: list
    pc: int = 0
    remaining: int | None = None
    awaiting_seq: int | None = None


@dataclass
class EnclaveDescriptor:
    eid: int
    code_hash: Measurement
    external_id: str
    zones: list[PmpZone]
    owner_process: int
    program: EnclaveProgram | None = None
    state: EnclaveState = EnclaveState.CREATED
    hart_id: int | None = None
    context: EnclaveContext | None = None
    invocation: Invocation | None = None
    next_seq: int = 1
    entries: int = 0

    @property
    def domain(self) -> str:
        return f"enclave:{self.eid}"

    @property
    def identity(self) -> EnclaveIdentity:
        return EnclaveIdentity(self.code_hash, self.external_id)

    @property
    def memory(self) -> PmpZone:
        return self.zones[0]

    @property
    def channel(self) -> PmpZone:
        return self.zones[1]


class ZoneMap:
    """All zones of all live enclaves plus per-hart residency in LRU order."""

    def __init__(self):
        self.zones: dict[tuple[int, int], PmpZone] = {}
        self.resident: dict[int, OrderedDict[tuple[int, int], PmpEntry]] = {}

    def add(self, zone: PmpZone) -> None:
        self.zones[zone.key] = zone

    def remove(self, zone: PmpZone) -> None:
        self.zones.pop(zone.key, None)

    def find(self, addr: int, length: int = 1) -> PmpZone | None:
        for zone in self.zones.values():
            if zone.base <= addr < zone.end:
                return zone if zone.contains(addr, length) else None
        return None

    def lru(self, hart_id: int) -> OrderedDict:
        return self.resident.setdefault(hart_id, OrderedDict())

    def is_resident(self, hart_id: int, zone: PmpZone) -> bool:
        return zone.key in self.lru(hart_id)


class SecureMonitor:
    def __init__(self, machine: Machine, creds: BootCredentials, th: TrustedHart,
                 mode: PmpMode | str = PmpMode.STRICT, enclave_size: int = DEFAULT_ENCLAVE_SIZE):
        if not machine.booted:
            raise BadState("machine not booted")
        self.machine = machine
        self.creds = creds
        self.th = th
        self.mode = PmpMode(mode)
        self.enclave_size = enclave_size
        self.enclaves: dict[int, EnclaveDescriptor] = {}
        self.zone_map = ZoneMap()
        self.faults = 0
        self.denials = 0
        self.max_occupancy = 0
        self._next_eid = 1
        self._sm_seq = 0
        self.next_session_handle = 3  # REE driver handles, numbered per SM instance
        self._strict_entries: dict[tuple[int, tuple[int, int]], PmpEntry] = {}
        cfg = machine.config
        pool = machine.layout.channel_pool
        self._free_buffers = [pool.base + i * cfg.channel_buffer_size for i in range(cfg.channel_buffers)]
        self._epm_free: list[tuple[int, int]] = [(machine.layout.epm.base, machine.layout.epm.length)]
        self.th.notify = self._th_notify if cfg.th_ipi else None

    # -- helpers -----------------------------------------------------------------------------

    def _live(self, eid: int) -> EnclaveDescriptor:
        desc = self.enclaves.get(eid)
        if desc is None:
            raise NoSuchEnclave(f"no enclave {eid}")
        if desc.state is EnclaveState.DESTROYED:
            raise EnclaveDestroyed(f"enclave {eid} destroyed")
        return desc

    def _pick_hart(self, hart_id: int | None) -> Hart:
        harts = self.machine.normal_harts
        if hart_id is None:
            return harts[0]
        hart = self.machine.hart(hart_id)
        if hart not in harts:
            raise BadState(f"hart {hart_id} is not a normal hart")
        return hart

    def _alloc_epm(self, size: int) -> int:
        for i, (base, length) in enumerate(self._epm_free):
            if length >= size:
                if length == size:
                    del self._epm_free[i]
                else:
                    self._epm_free[i] = (base + size, length - size)
                return base
        raise PoolExhausted("enclave memory pool exhausted")

    def _free_epm(self, base: int, size: int) -> None:
        spans = sorted(self._epm_free + [(base, size)])
        merged: list[tuple[int, int]] = []
        for b, n in spans:
            if merged and merged[-1][0] + merged[-1][1] == b:
                merged[-1] = (merged[-1][0], merged[-1][1] + n)
            else:
                merged.append((b, n))
        self._epm_free = merged

    def live_enclaves(self) -> list[EnclaveDescriptor]:
        return [d for d in self.enclaves.values() if d.state is not EnclaveState.DESTROYED]

    def owner_of(self, addr: int) -> str | None:
        zone = self.zone_map.find(addr)
        return zone.owner if zone else None

    # -- lifecycle -----------------------------------------------------------------------------

    def enclave_create(self, image: bytes, external_id: str = "", ree_process: int = 0,
                       program: EnclaveProgram | None = None, size: int | None = None) -> EnclaveDescriptor:
        code_hash = measure(image)
        size = size or self.enclave_size
        if len(image) > size:
            raise ValueError(f"image of {len(image)} bytes does not fit a {size}-byte enclave")
        identity = EnclaveIdentity(code_hash, external_id)
        needed = 2 * REGISTERS_PER_ZONE
        if self.mode is PmpMode.STRICT:
            short = [h.id for h in self.machine.normal_harts if h.pmp.free < needed]
            if short:
                raise ResourceExhausted(f"fewer than {needed} free PMP registers on harts {short}")
        if not self._free_buffers:
            raise PoolExhausted("TH channel buffer pool exhausted")
        base = self._alloc_epm(size)
        buffer = self._free_buffers.pop(0)

        eid = self._next_eid
        self._next_eid += 1
        domain = f"enclave:{eid}"
        zones = [
            PmpZone(base, size, Perm.RWX, domain, "memory"),
            PmpZone(buffer, self.machine.config.channel_buffer_size, Perm.RW, domain, "channel"),
        ]
        mem = self.machine.memory
        mem.claim(base, size, domain)
        mem.zero(base, size)
        mem.write(base, image)
        mem.zero(buffer, zones[1].length)
        for zone in zones:
            self.zone_map.add(zone)
            if self.mode is PmpMode.STRICT:
                for hart in self.machine.normal_harts:
                    entry = PmpEntry(zone.base, zone.length, Perm.NONE, tag=f"{domain}/{zone.kind}")
                    hart.pmp.install(entry, zone.registers_needed)
                    self._strict_entries[(hart.id, zone.key)] = entry

        desc = EnclaveDescriptor(eid, code_hash, external_id, zones, ree_process, program,
                                 context=EnclaveContext(eid))
        self.enclaves[eid] = desc
        self.th.register_channel(eid, identity, Region(buffer, zones[1].length))
        self.machine.log("sm-create", f"eid={eid} hash={code_hash.hex()[:16]} ext={external_id!r} "
                         f"mem={base:#x} buf={buffer:#x}")
        return desc

    def enclave_destroy(self, eid: int) -> None:
        desc = self.enclaves.get(eid)
        if desc is None:
            raise NoSuchEnclave(f"no enclave {eid}")
        if desc.state is EnclaveState.DESTROYED:
            raise EnclaveDestroyed(f"enclave {eid} already destroyed")
        mem = self.machine.memory
        for zone in desc.zones:
            mem.zero(zone.base, zone.length)
            self.zone_map.remove(zone)
            for hart in self.machine.normal_harts:
                entry = self._strict_entries.pop((hart.id, zone.key), None)
                if entry is None:
                    entry = self.zone_map.lru(hart.id).pop(zone.key, None)
                if entry is not None:
                    hart.pmp.remove(entry)
        mem.release(desc.memory.base)
        self._free_epm(desc.memory.base, desc.memory.length)
        self._free_buffers.append(desc.channel.base)
        self._free_buffers.sort()
        self.th.drop_channel(eid)
        desc.invocation = None
        desc.state = EnclaveState.DESTROYED
        self.machine.log("sm-destroy", f"eid={eid}")

    # -- PMP views -----------------------------------------------------------------------------

    def pmp_swap(self, hart: Hart, from_domain: str | None, to_domain: str) -> None:
        if from_domain is not None and hart.domain != from_domain:
            raise BadState(f"hart {hart.id} is in {hart.domain!r}, not {from_domain!r}")
        for entry in hart.pmp.system_entries():
            entry.perms = Perm.RWX if to_domain == REE else Perm.NONE
        resident = self._resident_entries(hart)
        for key, entry in resident.items():
            zone = self.zone_map.zones.get(key)
            entry.perms = zone.perms if zone is not None and zone.owner == to_domain else Perm.NONE
        hart.domain = to_domain
        self.machine.log("pmp-swap", f"{from_domain}->{to_domain}", hart=hart.id)

    def _resident_entries(self, hart: Hart) -> dict[tuple[int, int], PmpEntry]:
        if self.mode is PmpMode.STRICT:
            return {key: e for (hid, key), e in self._strict_entries.items() if hid == hart.id}
        return dict(self.zone_map.lru(hart.id))

    def pmp_fault_refill(self, hart: Hart, addr: int, length: int = 1) -> RefillResult:
        if self.mode is not PmpMode.CACHE:
            return RefillResult.DENIED
        zone = self.zone_map.find(addr, length)
        lru = self.zone_map.lru(hart.id)
        if zone is None or zone.owner != hart.domain or zone.key in lru:
            return RefillResult.DENIED
        while hart.pmp.free < zone.registers_needed:
            if not lru:
                raise ResourceExhausted("no evictable PMP zone")
            victim_key, victim = lru.popitem(last=False)
            hart.pmp.remove(victim)
            self.machine.log("pmp-evict", f"{victim.tag}", hart=hart.id)
        entry = PmpEntry(zone.base, zone.length, zone.perms, tag=f"{zone.owner}/{zone.kind}")
        hart.pmp.install(entry, zone.registers_needed)
        lru[zone.key] = entry
        self.faults += 1
        self.machine.log("pmp-refill", entry.tag, hart=hart.id)
        return RefillResult.REFILLED

    def access(self, hart: Hart, addr: int, length: int, access: Perm) -> Outcome:
        """A U/S-mode access from ``hart``; in cache mode faults go through the refill path."""
        outcome = self.machine.pmp_check(hart, addr, length, access)
        if not outcome and self.mode is PmpMode.CACHE and hart.mode is not Mode.M:
            if self.pmp_fault_refill(hart, addr, length) is RefillResult.REFILLED:
                outcome = self.machine.pmp_check(hart, addr, length, access)
        if outcome and self.mode is PmpMode.CACHE:
            lru = self.zone_map.lru(hart.id)
            zone = self.zone_map.find(addr, length)
            if zone is not None and zone.key in lru:
                lru.move_to_end(zone.key)
        if not outcome:
            self.denials += 1
        return outcome

    def access_as(self, domain: str, addr: int, length: int, access: Perm, hart_id: int | None = None) -> Outcome:
        """Switch a normal hart (or the TH hart) into ``domain`` and perform one access."""
        if domain == TH:
            return self.access(self.machine.trusted_hart, addr, length, access)
        hart = self._pick_hart(hart_id)
        if hart.domain != domain:
            self.pmp_swap(hart, None, domain)
        return self.access(hart, addr, length, access)

    # -- execution -----------------------------------------------------------------------------

    def enclave_enter(self, eid: int, request=None, hart_id: int | None = None) -> ExitEvent:
        desc = self._live(eid)
        if desc.invocation is not None:
            raise BadState(f"enclave {eid} has an invocation in progress; resume it")
        if desc.program is None:
            raise BadState(f"enclave {eid} has no program")
        desc.context.request = request
        desc.invocation = Invocation(desc.program.steps_for(request, desc.context))
        return self._run(desc, self._pick_hart(hart_id))

    def enclave_resume(self, eid: int, ocall_result=None, hart_id: int | None = None) -> ExitEvent:
        desc = self._live(eid)
        if desc.invocation is None:
            raise BadState(f"enclave {eid} has nothing to resume")
        if ocall_result is not None:
            desc.context.ocall_results.append(ocall_result)
        return self._run(desc, self._pick_hart(hart_id))

    def _run(self, desc: EnclaveDescriptor, hart: Hart) -> ExitEvent:
        if hart.domain != REE:
            raise BadState(f"hart {hart.id} is busy in {hart.domain}")
        clock = self.machine.clock
        hart.context[REE] = {"saved_at": clock.now}
        self.pmp_swap(hart, REE, desc.domain)
        hart.context = hart.context | {"enclave": desc.eid}
        desc.state = EnclaveState.RUNNING
        desc.hart_id = hart.id
        desc.entries += 1
        self.machine.take_ipis(hart)
        entered = clock.now
        slice_end = entered + clock.slice_ms
        inv = desc.invocation
        self.machine.log("sm-enter", f"eid={desc.eid} pc={inv.pc}", hart=hart.id)

        if inv.awaiting_seq is not None:
            self.poll_th(desc.eid)

        event = self._execute(desc, hart, slice_end)

        self.max_occupancy = max(self.max_occupancy, clock.now - entered)
        self.pmp_swap(hart, desc.domain, REE)
        hart.context.pop("enclave", None)
        if event.kind is ExitKind.COMPLETED:
            desc.invocation = None
            desc.state = EnclaveState.STOPPED
        else:
            desc.state = EnclaveState.AWAITING_TH if inv.awaiting_seq is not None else EnclaveState.STOPPED
        self.machine.log("sm-exit", f"eid={desc.eid} {event.kind.value} {event.reason}".rstrip(), hart=hart.id)
        return event

    def _execute(self, desc: EnclaveDescriptor, hart: Hart, slice_end: int) -> ExitEvent:
        clock = self.machine.clock
        inv, ctx = desc.invocation, desc.context
        while True:
            if inv.pc >= len(inv.steps):
                return ExitEvent(ExitKind.COMPLETED, clock.now)
            step = inv.steps[inv.pc]
            if isinstance(step, Compute):
                if inv.remaining is None:
                    inv.remaining = step.ms
                run = min(inv.remaining, slice_end - clock.now)
                clock.advance(run)
                inv.remaining -= run
                if inv.remaining > 0:
                    return ExitEvent(ExitKind.PREEMPTED, clock.now, reason="timer")
                inv.remaining = None
                if step.effect is not None:
                    step.effect(ctx)
                inv.pc += 1
            elif isinstance(step, OCall):
                inv.pc += 1
                return ExitEvent(ExitKind.OCALL, clock.now, ocall=step.name, payload=resolve(step.payload, ctx))
            elif isinstance(step, ThRequest):
                if inv.awaiting_seq is not None:
                    raise BadState("only one outstanding TH request per channel")
                self._post_request(desc, hart, step.kind, resolve(step.payload, ctx))
                inv.pc += 1
            elif isinstance(step, PollTh):
                if inv.awaiting_seq is None:
                    inv.pc += 1
                    continue
                return self._wait_for_th(desc, hart, slice_end)
            elif isinstance(step, Attest):
                ctx.vars["report"] = self.attest(desc.eid, resolve(step.user_data, ctx))
                inv.pc += 1
            elif isinstance(step, Return):
                inv.pc += 1
                return ExitEvent(ExitKind.COMPLETED, clock.now, result=resolve(step.result, ctx))
            else:
                raise TypeError(f"unknown step {step!r}")

    def _wait_for_th(self, desc: EnclaveDescriptor, hart: Hart, slice_end: int) -> ExitEvent:
        clock = self.machine.clock
        if self.machine.config.th_ipi:
            ready = self.th.ready_time(desc.eid)
            if ready is not None and ready <= slice_end:
                clock.advance_to(max(ready, clock.now))
                self.th.run_until(clock.now)
                if self.machine.take_ipis(hart):
                    return ExitEvent(ExitKind.PREEMPTED, clock.now, reason="ipi")
        clock.advance_to(slice_end)
        return ExitEvent(ExitKind.PREEMPTED, clock.now, reason="timer")

    def _th_notify(self, eid: int) -> None:
        desc = self.enclaves.get(eid)
        if desc is None or desc.hart_id is None:
            return
        target = self.machine.hart(desc.hart_id)
        if target.domain == desc.domain:
            self.machine.send_ipi(self.machine.trusted_hart, target)

    # -- TH channel ----------------------------------------------------------------------------

    def _post_request(self, desc: EnclaveDescriptor, hart: Hart, kind: MsgKind, payload: bytes) -> ThMessage:
        msg = ThMessage(desc.eid, desc.next_seq, kind, bytes(payload))
        encoded = msg.encode()
        if not self.access(hart, desc.channel.base, len(encoded), Perm.W):
            raise BadState("enclave cannot write its own channel buffer")
        self.machine.memory.write(desc.channel.base, encoded)
        desc.next_seq += 1
        desc.invocation.awaiting_seq = msg.seq
        self.machine.send_ipi(hart, self.machine.trusted_hart)
        self.th.on_ipi()
        return msg

    def poll_th(self, eid: int) -> tuple[str, ThMessage | None]:
        """Read the channel's response slot; ``done`` only once the TH has published it."""
        desc = self._live(eid)
        inv = desc.invocation
        if inv is None or inv.awaiting_seq is None:
            raise NoRequest(f"enclave {eid} has no outstanding TH request")
        self.th.run_until(self.machine.clock.now)
        raw = self.machine.memory.read(desc.channel.base + RESPONSE_OFFSET, HEADER.size)
        status, seq = raw[1], HEADER.unpack_from(raw)[3]
        if status not in (Status.DONE, Status.ERROR) or seq != inv.awaiting_seq:
            return "pending", None
        length = HEADER.unpack_from(raw)[5]
        response = ThMessage.decode(eid, self.machine.memory.read(desc.channel.base + RESPONSE_OFFSET,
                                                                  HEADER.size + length))
        desc.context.responses.append(response)
        inv.awaiting_seq = None
        return "done", response

    # -- attestation & peripherals -------------------------------------------------------------

    def forward_attestation_request(self, eid: int, user_data: bytes = b"") -> ThMessage:
        desc = self._live(eid)
        if len(user_data) > MAX_USER_DATA:
            raise DataTooLarge(f"user data of {len(user_data)} bytes exceeds {MAX_USER_DATA}")
        self._sm_seq += 1
        return ThMessage(SM_CHANNEL, self._sm_seq, MsgKind.ATTEST, desc.code_hash.digest + bytes(user_data))

    def attest(self, eid: int, user_data: bytes = b"") -> bytes:
        response = self.th.dispatch(self.forward_attestation_request(eid, user_data))
        return response.raise_for_status().payload

    def peripheral_request(self, requester, pid: int):
        """REE/TH requests go straight to the SPM; enclave ids are mapped to their SM-held identity."""
        if isinstance(requester, int):
            requester = self._live(requester).identity
        return self.th.spm.request(requester, pid)

    # -- SBI surface ---------------------------------------------------------------------------

    def sbi(self, call: SbiCall | int, *args, **kwargs):
        call = SbiCall(call)
        if call is SbiCall.CREATE:
            return self.enclave_create(*args, **kwargs)
        if call is SbiCall.ENTER:
            return self.enclave_enter(*args, **kwargs)
        if call is SbiCall.RESUME:
            return self.enclave_resume(*args, **kwargs)
        if call is SbiCall.DESTROY:
            return self.enclave_destroy(*args, **kwargs)
        if call is SbiCall.ATTEST:
            return self.attest(*args, **kwargs)
        source, target = args
        return self.machine.send_ipi(self.machine.hart(source), self.machine.hart(target))

    def strict_capacity(self) -> int:
        cfg = self.machine.config
        return (cfg.pmp_capacity - cfg.pmp_reserved) // (2 * REGISTERS_PER_ZONE)
