"""Scripted enclave programs.

A program maps an incoming request to a list of steps. Step fields may be
plain values or callables taking the enclave's :class:`EnclaveContext`, so
later steps can use results of earlier ones.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Callable

from ..th.messages import MsgKind, ThMessage


@dataclass
class EnclaveContext:
    """Enclave-private state. ``vars`` persists across invocations."""

    eid: int
    request: Any = None
    responses: list[ThMessage] = field(default_factory=list)
    ocall_results: list[Any] = field(default_factory=list)
    vars: dict[str, Any] = field(default_factory=dict)

    @property
    def last_response(self) -> ThMessage | None:
        return self.responses[-1] if self.responses else None


def resolve(value, ctx: EnclaveContext):
    return value(ctx) if callable(value) else value


@dataclass(frozen=True)
class Compute:
    ms: int
    effect: Callable[[EnclaveContext], None] | None = None

    def __post_init__(self):
        if self.ms < 0:
            raise ValueError("compute cost must be >= 0")


@dataclass(frozen=True)
class OCall:
    name: str
    payload: Any = b""


@dataclass(frozen=True)
class ThRequest:
    kind: MsgKind
    payload: Any = b""


@dataclass(frozen=True)
class PollTh:
    """Wait for the outstanding TH response; status is only checked on enclave entry."""


@dataclass(frozen=True)
class Attest:
    user_data: Any = b""


@dataclass(frozen=True)
class Return:
    result: Any = None


Step = Compute | OCall | ThRequest | PollTh | Attest | Return


class EnclaveProgram:
    def __init__(self, handler: Callable[[Any, EnclaveContext], list] | list, name: str = "program"):
        self._handler = handler
        self.name = name

    def steps_for(self, request, ctx: EnclaveContext) -> list:
        if callable(self._handler):
            return list(self._handler(request, ctx))
        return list(self._handler)

    def __repr__(self):
        return f"EnclaveProgram({self.name!r})"
