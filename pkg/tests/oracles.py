"""Reference models written independently of the package internals."""

from __future__ import annotations

import math


def pmp_byte_oracle(entries, addr, length, access):
    """Allowed iff every byte lies in at least one entry granting ``access`` (entries: base, length, perm-set)."""
    return all(any(b <= a < b + n and access in perms for b, n, perms in entries)
               for a in range(addr, addr + length))


def polling_latency_trace(th_cost: int, slice_ms: int, *, ipi: bool = False) -> int:
    """Tick-by-tick replay of one TH request issued at t=0 by an enclave that polls on entry.

    The enclave posts the request, keeps its hart until the slice ends (or an
    IPI arrives when enabled), is rescheduled immediately, and polls on entry.
    """
    ready = th_cost
    t = 0
    slice_end = slice_ms
    while True:
        if ipi and t >= ready:
            return t
        if t == slice_end:
            if t >= ready:
                return t
            slice_end += slice_ms
        t += 1


def quantization_formula(th_cost: int, slice_ms: int) -> int:
    return math.ceil(max(th_cost, 1) / slice_ms) * slice_ms


def split_report(blob: bytes) -> dict:
    """Parse an attestation report by fixed offsets."""
    fields = {}
    pos = 0
    for name, size in (("sha_sm", 64), ("pub_sm", 32), ("sgn_d", 64),
                       ("sha_th", 64), ("pub_th", 32), ("sgn_sm", 64), ("sha_enclave", 64)):
        fields[name] = blob[pos:pos + size]
        pos += size
    n = int.from_bytes(blob[pos:pos + 2], "little")
    fields["data"] = blob[pos + 2:pos + 2 + n]
    fields["sgn_th"] = blob[pos + 2 + n:pos + 2 + n + 64]
    fields["_offsets"] = pos
    return fields
