"""REE host model: processes holding enclave sessions through a driver.

Sessions are file-handle-like. A handle copied into another process keeps
working, which is the least-privilege gap the architecture leaves to the
REE; it is modelled on purpose.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

from ..errors import AccessDenied
from ..monitor import ExitKind, SecureMonitor
from .program import EnclaveProgram


@dataclass
class InvokeResult:
    result: Any
    latency_ms: int
    entries: int
    exits: list = field(default_factory=list)


class ReeClient:
    def __init__(self, sm: SecureMonitor, pid: int, ocall_handlers: dict[str, Callable] | None = None):
        self.sm = sm
        self.pid = pid
        self.sessions: dict[int, int] = {}
        self.ocall_handlers = dict(ocall_handlers or {})

    def open_session(self, image: bytes, program: EnclaveProgram, external_id: str = "") -> int:
        desc = self.sm.enclave_create(image, external_id or f"pid{self.pid}", self.pid, program)
        handle = self.sm.next_session_handle
        self.sm.next_session_handle += 1
        self.sessions[handle] = desc.eid
        return handle

    def share_handle(self, handle: int, other: "ReeClient") -> None:
        other.sessions[handle] = self.sessions[handle]

    def eid(self, handle: int) -> int:
        try:
            return self.sessions[handle]
        except KeyError:
            raise AccessDenied(f"process {self.pid} holds no session {handle}") from None

    def invoke(self, handle: int, request=None, hart_id: int | None = None) -> InvokeResult:
        """Enter the enclave and drive it to completion, servicing ocalls and re-entering after preemption."""
        eid = self.eid(handle)
        clock = self.sm.machine.clock
        start = clock.now
        exits = []
        event = self.sm.enclave_enter(eid, request, hart_id)
        exits.append(event)
        while event.kind is not ExitKind.COMPLETED:
            result = None
            if event.kind is ExitKind.OCALL:
                handler = self.ocall_handlers.get(event.ocall)
                result = handler(event.payload) if handler else b""
            event = self.sm.enclave_resume(eid, result, hart_id)
            exits.append(event)
        return InvokeResult(event.result, clock.now - start, len(exits), exits)

    def close_session(self, handle: int) -> None:
        eid = self.sessions.pop(handle)
        self.sm.enclave_destroy(eid)
