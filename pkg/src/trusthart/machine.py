"""The simulated hardware platform.

Physical memory, per-hart PMP register files, inter-processor interrupts,
OTP, monotonic counters, a virtual clock and non-CPU bus masters. PMP
entries are plain (base, length) ranges; an access is allowed when every
byte of it is covered by some active entry granting the access bits.
"""

from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass, field

from .crypto import Drbg, Measurement
from .errors import IpiDisabled, MemoryFault, ResourceExhausted, Saturated, TargetHalted

DRAM_BASE = 0x8000_0000
KIB = 1024
MIB = 1024 * KIB
WORD_MAX = 2**64 - 1


class Perm(enum.Flag):
    NONE = 0
    R = 1
    W = 2
    X = 4
    RW = R | W
    RX = R | X
    RWX = R | W | X

    @classmethod
    def parse(cls, text: str) -> "Perm":
        perm = cls.NONE
        for ch in text.lower():
            perm |= {"r": cls.R, "w": cls.W, "x": cls.X}[ch]
        return perm


class Outcome(enum.Enum):
    ALLOW = "allow"
    FAULT = "fault"

    def __bool__(self):
        return self is Outcome.ALLOW


class Mode(enum.Enum):
    M = "M"
    S = "S"
    U = "U"


class Role(enum.Enum):
    NORMAL = "normal"
    TRUSTED = "trusted"
    HALTED = "halted"


@dataclass
class PmpEntry:
    base: int
    length: int
    perms: Perm = Perm.NONE
    locked: bool = False
    tag: str = ""

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("PMP entry length must be positive")

    @property
    def end(self) -> int:
        return self.base + self.length

    def covers(self, addr: int, length: int) -> bool:
        return self.base <= addr and addr + length <= self.end


class PmpRegisterFile:
    """Fixed-capacity register file; the first ``reserved_system`` slots belong to M-mode."""

    def __init__(self, capacity: int = 8, reserved_system: int = 2):
        if not 0 <= reserved_system <= capacity <= 64:
            raise ValueError("need 0 <= reserved_system <= capacity <= 64")
        self.capacity = capacity
        self.reserved_system = reserved_system
        self.slots: list[PmpEntry | None] = [None] * capacity

    def _free_slots(self) -> list[int]:
        return [i for i in range(self.reserved_system, self.capacity) if self.slots[i] is None]

    @property
    def free(self) -> int:
        return len(self._free_slots())

    @property
    def granted(self) -> int:
        return sum(1 for i in range(self.reserved_system, self.capacity) if self.slots[i] is not None)

    def install(self, entry: PmpEntry, registers: int = 2) -> list[int]:
        free = self._free_slots()
        if len(free) < registers:
            raise ResourceExhausted(f"need {registers} PMP registers, {len(free)} free")
        used = free[:registers]
        for i in used:
            self.slots[i] = entry
        return used

    def install_system(self, entry: PmpEntry, registers: int = 2) -> None:
        if registers > self.reserved_system:
            raise ResourceExhausted("system entry does not fit the reserved registers")
        for i in range(self.reserved_system):
            self.slots[i] = entry if i < registers else None

    def remove(self, entry: PmpEntry) -> int:
        freed = 0
        for i in range(self.reserved_system, self.capacity):
            if self.slots[i] is entry:
                self.slots[i] = None
                freed += 1
        return freed

    def entries(self) -> list[PmpEntry]:
        seen: list[PmpEntry] = []
        for slot in self.slots:
            if slot is not None and not any(slot is s for s in seen):
                seen.append(slot)
        return seen

    def system_entries(self) -> list[PmpEntry]:
        return [e for e in self.entries() if any(self.slots[i] is e for i in range(self.reserved_system))]

    def clear(self) -> None:
        self.slots = [None] * self.capacity

    def admits(self, addr: int, length: int, access: Perm) -> bool:
        spans = sorted((e.base, e.end) for e in self.entries() if access in e.perms)
        cursor, stop = addr, addr + length
        for lo, hi in spans:
            if lo > cursor:
                break
            cursor = max(cursor, hi)
            if cursor >= stop:
                return True
        return cursor >= stop


@dataclass
class Hart:
    id: int
    pmp: PmpRegisterFile
    mode: Mode = Mode.M
    role: Role = Role.NORMAL
    domain: str = ""
    context: dict = field(default_factory=dict)


class OtpStore:
    """Write-once fuses. Each field can be programmed exactly once."""

    def __init__(self):
        self._fields: dict[str, object] = {}

    def program(self, name: str, value) -> None:
        if name in self._fields:
            raise PermissionError(f"OTP field {name!r} already programmed")
        self._fields[name] = value

    def read(self, name: str):
        return self._fields.get(name)

    @property
    def device_key_seed(self) -> bytes:
        return self._fields["device_key_seed"]

    @property
    def trust_root_hash(self) -> Measurement | None:
        return self._fields.get("trust_root_hash")


class MonotonicCounter:
    def __init__(self, value: int = 0):
        self._value = value

    def read(self) -> int:
        return self._value

    @property
    def value(self) -> int:
        return self._value

    def increment(self) -> int:
        if self._value >= WORD_MAX:
            raise Saturated("monotonic counter at word max")
        self._value += 1
        return self._value


class VirtualClock:
    def __init__(self, slice_ms: int = 100):
        if slice_ms <= 0:
            raise ValueError("slice_ms must be positive")
        self.now = 0
        self.slice_ms = slice_ms

    def advance(self, ms: int) -> int:
        if ms < 0:
            raise ValueError("clock cannot move backwards")
        self.now += ms
        return self.now

    def advance_to(self, t: int) -> int:
        if t < self.now:
            raise ValueError(f"clock cannot move backwards ({t} < {self.now})")
        self.now = t
        return self.now


class BusKind(enum.Enum):
    DMA = "dma"
    ETHERNET = "ethernet"


@dataclass(frozen=True)
class BusMaster:
    id: int
    kind: BusKind


@dataclass(frozen=True)
class IopmpGrant:
    base: int
    length: int
    perms: Perm
    master: int | None = None

    def covers(self, addr: int, length: int) -> bool:
        return self.base <= addr and addr + length <= self.base + self.length


@dataclass(frozen=True)
class IpiEvent:
    time: int
    source: int
    target: int
    handler: str = "S"


@dataclass(frozen=True)
class TraceEvent:
    time: int
    hart: int | None
    kind: str
    detail: str = ""

    def line(self) -> str:
        hart = "-" if self.hart is None else str(self.hart)
        return f"{self.time:>8} hart={hart} {self.kind} {self.detail}".rstrip()


@dataclass(frozen=True)
class Region:
    base: int
    length: int

    @property
    def end(self) -> int:
        return self.base + self.length

    def __contains__(self, addr: int) -> bool:
        return self.base <= addr < self.end


@dataclass
class MachineConfig:
    harts: int = 5
    pmp_capacity: int = 8
    pmp_reserved: int = 2
    memory_size: int = 4 * MIB
    slice_ms: int = 100
    iopmp: bool = False
    th_ipi: bool = False
    sm_size: int = 256 * KIB
    th_size: int = 512 * KIB
    channel_buffers: int = 16
    channel_buffer_size: int = 4 * KIB
    epm_size: int = 1 * MIB

    def __post_init__(self):
        if self.harts < 3:
            raise ValueError("need at least 3 harts (boot, trusted, one normal)")
        used = self.sm_size + self.th_size + self.channel_buffers * self.channel_buffer_size + self.epm_size
        if used >= self.memory_size:
            raise ValueError("memory too small for the fixed layout")


@dataclass(frozen=True)
class MemoryLayout:
    sm: Region
    th: Region
    channel_pool: Region
    epm: Region
    ree: Region

    @classmethod
    def from_config(cls, cfg: MachineConfig) -> "MemoryLayout":
        cursor = DRAM_BASE
        regions = []
        for size in (cfg.sm_size, cfg.th_size, cfg.channel_buffers * cfg.channel_buffer_size, cfg.epm_size):
            regions.append(Region(cursor, size))
            cursor += size
        regions.append(Region(cursor, DRAM_BASE + cfg.memory_size - cursor))
        return cls(*regions)


class PhysMemory:
    def __init__(self, size: int, base: int = DRAM_BASE):
        self.base = base
        self.size = size
        self.contents = bytearray(size)
        self.regions: list[tuple[int, int, str]] = []

    def _offset(self, addr: int, length: int) -> int:
        if length < 0 or addr < self.base or addr + length > self.base + self.size:
            raise MemoryFault(f"physical access out of bounds: {addr:#x}+{length}")
        return addr - self.base

    def read(self, addr: int, length: int) -> bytes:
        off = self._offset(addr, length)
        return bytes(self.contents[off:off + length])

    def write(self, addr: int, data: bytes) -> None:
        off = self._offset(addr, len(data))
        self.contents[off:off + len(data)] = data

    def zero(self, addr: int, length: int) -> None:
        off = self._offset(addr, length)
        self.contents[off:off + length] = bytes(length)

    def claim(self, base: int, length: int, owner: str) -> None:
        self._offset(base, length)
        for b, n, o in self.regions:
            if base < b + n and b < base + length:
                raise ValueError(f"region {base:#x}+{length} overlaps {o}")
        self.regions.append((base, length, owner))

    def release(self, base: int) -> None:
        self.regions = [r for r in self.regions if r[0] != base]

    def owner_of(self, addr: int) -> str | None:
        for b, n, o in self.regions:
            if b <= addr < b + n:
                return o
        return None

    def wipe(self) -> None:
        self.contents = bytearray(self.size)
        self.regions.clear()


class Machine:
    """Single-owner simulated SoC.

    ``seed`` provisions the OTP device-key seed; ``trust_root`` is the
    expected measurement of the first-stage bootloader.
    """

    def __init__(self, config: MachineConfig | None = None, seed: bytes = bytes(32),
                 trust_root: Measurement | None = None):
        self.config = config or MachineConfig()
        self.layout = MemoryLayout.from_config(self.config)
        self.memory = PhysMemory(self.config.memory_size)
        self.clock = VirtualClock(self.config.slice_ms)
        self.otp = OtpStore()
        self.otp.program("device_key_seed", Drbg(seed).derive(b"otp:device-key-seed"))
        if trust_root is not None:
            self.otp.program("trust_root_hash", trust_root)
        self.counters: dict[str, MonotonicCounter] = {}
        self.nvstore: dict[str, bytes] = {}
        self.bus_masters = [BusMaster(0, BusKind.DMA), BusMaster(1, BusKind.ETHERNET)]
        self.iopmp_enabled = self.config.iopmp
        self.iopmp_table: list[IopmpGrant] = []
        self.trace: list[TraceEvent] = []
        self.power_cycles = 0
        self._reset_volatile()

    def _reset_volatile(self) -> None:
        self.harts = [
            Hart(i, PmpRegisterFile(self.config.pmp_capacity, self.config.pmp_reserved))
            for i in range(self.config.harts)
        ]
        self._ipis: dict[int, deque[IpiEvent]] = {h.id: deque() for h in self.harts}
        self.iopmp_table = []
        self.booted = False

    # -- bookkeeping -----------------------------------------------------------------

    def log(self, kind: str, detail: str = "", hart: int | None = None) -> None:
        self.trace.append(TraceEvent(self.clock.now, hart, kind, detail))

    def counter(self, name: str) -> MonotonicCounter:
        return self.counters.setdefault(name, MonotonicCounter())

    def hart(self, hart_id: int) -> Hart:
        return self.harts[hart_id]

    @property
    def trusted_hart(self) -> Hart:
        for h in self.harts:
            if h.role is Role.TRUSTED:
                return h
        raise LookupError("no trusted hart (machine not booted)")

    @property
    def normal_harts(self) -> list[Hart]:
        return [h for h in self.harts if h.role is Role.NORMAL]

    # -- protection checks -----------------------------------------------------------

    def pmp_check(self, hart: Hart, addr: int, length: int, access: Perm) -> Outcome:
        if length < 1:
            raise ValueError("access length must be >= 1")
        if hart.role is Role.HALTED:
            return Outcome.FAULT
        if hart.mode is Mode.M:
            return Outcome.ALLOW
        return Outcome.ALLOW if hart.pmp.admits(addr, length, access) else Outcome.FAULT

    def bus_master_access(self, master: BusMaster, addr: int, length: int, access: Perm) -> Outcome:
        if length < 1:
            raise ValueError("access length must be >= 1")
        if not self.iopmp_enabled:
            return Outcome.ALLOW
        for grant in self.iopmp_table:
            if grant.master in (None, master.id) and access in grant.perms and grant.covers(addr, length):
                return Outcome.ALLOW
        return Outcome.FAULT

    def iopmp_grant(self, grant: IopmpGrant) -> None:
        self.iopmp_table.append(grant)

    def dma_read(self, master: BusMaster, addr: int, length: int) -> bytes:
        if not self.bus_master_access(master, addr, length, Perm.R):
            self.log("iopmp-fault", f"master={master.id} addr={addr:#x} len={length}")
            raise MemoryFault(f"IOPMP denied {master.kind.value} read at {addr:#x}")
        return self.memory.read(addr, length)

    # -- interrupts ------------------------------------------------------------------

    def send_ipi(self, source: Hart, target: Hart) -> IpiEvent:
        if source.role is Role.HALTED or target.role is Role.HALTED:
            raise TargetHalted(f"IPI {source.id}->{target.id}: halted hart")
        if source.role is Role.TRUSTED and target.role is Role.NORMAL and not self.config.th_ipi:
            raise IpiDisabled("TH to enclave-hart IPIs are not enabled")
        event = IpiEvent(self.clock.now, source.id, target.id)
        self._ipis[target.id].append(event)
        self.log("ipi", f"{source.id}->{target.id} delegated-to=S", hart=source.id)
        return event

    def take_ipis(self, hart: Hart) -> list[IpiEvent]:
        queue = self._ipis[hart.id]
        out = list(queue)
        queue.clear()
        return out

    # -- power -----------------------------------------------------------------------

    def power_cycle(self) -> "Machine":
        self.memory.wipe()
        self._reset_volatile()
        self.power_cycles += 1
        self.log("power-cycle")
        return self
