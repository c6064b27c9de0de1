"""Secure Peripheral Manager.

Public peripherals belong to the REE. Trusted peripherals serve either one
allow-listed enclave at a time or the TH alone, never the REE. Shared
Trusted peripherals may be used by allow-listed enclaves and, per policy,
the TH.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from ..crypto import Measurement
from .messages import EnclaveIdentity

REE = "REE"
TH = "TH"


class PeripheralClass(enum.Enum):
    PUBLIC = "Public"
    TRUSTED = "Trusted"
    SHARED_TRUSTED = "SharedTrusted"


class Decision(enum.Enum):
    GRANTED = "granted"
    DENIED = "denied"

    def __bool__(self):
        return self is Decision.GRANTED


@dataclass(frozen=True)
class PeripheralPolicy:
    user: str = "enclave"  # "enclave" or "TH"; decides who may hold a Trusted peripheral
    allow: frozenset[Measurement] = frozenset()
    th_allowed: bool = True


@dataclass
class PeripheralDescriptor:
    id: int
    name: str
    cls: PeripheralClass
    assignment: object = None  # None, REE, TH or an enclave code hash
    policy: PeripheralPolicy = field(default_factory=PeripheralPolicy)


def _who(requester) -> object:
    return requester.code_hash if isinstance(requester, EnclaveIdentity) else requester


class SecurePeripheralManager:
    def __init__(self, peripherals=()):
        self.peripherals: dict[int, PeripheralDescriptor] = {p.id: p for p in peripherals}
        self.decisions: list[tuple[object, int, Decision]] = []

    def request(self, requester, pid: int) -> Decision:
        p = self.peripherals.get(pid)
        if p is None:
            raise KeyError(f"no peripheral {pid}")
        decision = self._decide(p, _who(requester))
        if decision:
            p.assignment = _who(requester)
        self.decisions.append((_who(requester), pid, decision))
        return decision

    def _decide(self, p: PeripheralDescriptor, who) -> Decision:
        if p.cls is PeripheralClass.PUBLIC:
            return Decision.GRANTED if who == REE else Decision.DENIED
        if who == REE:
            return Decision.DENIED
        if p.cls is PeripheralClass.TRUSTED:
            if who == TH:
                ok = p.policy.user == TH and p.assignment in (None, TH)
            else:
                ok = p.policy.user == "enclave" and who in p.policy.allow and p.assignment in (None, who)
            return Decision.GRANTED if ok else Decision.DENIED
        if who == TH:
            return Decision.GRANTED if p.policy.th_allowed else Decision.DENIED
        return Decision.GRANTED if who in p.policy.allow else Decision.DENIED

    def release(self, requester, pid: int) -> None:
        p = self.peripherals[pid]
        if p.assignment == _who(requester):
            p.assignment = None

    def violations(self) -> list[str]:
        return [f"Trusted peripheral {p.name!r} assigned to REE" for p in self.peripherals.values()
                if p.cls is not PeripheralClass.PUBLIC and p.assignment == REE]
