"""Requirement sweeps (S1-S5) shared by the CLI and the test-suite."""

from __future__ import annotations

from dataclasses import dataclass, field

from .boot import verify_endorsement_chain
from .crypto import measure
from .errors import ResourceExhausted
from .machine import Perm
from .monitor import REE, TH, PmpMode
from .th.report import verify_report

ACCESS_KINDS = (Perm.R, Perm.W, Perm.X)


@dataclass(frozen=True)
class Probe:
    domain: str
    zone: str
    access: Perm
    expected: bool
    actual: bool

    @property
    def ok(self) -> bool:
        return self.expected == self.actual


@dataclass
class Check:
    requirement: str
    name: str
    ok: bool
    detail: str = ""


@dataclass
class InvariantReport:
    checks: list[Check] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return all(c.ok for c in self.checks)

    def failed(self) -> list[Check]:
        return [c for c in self.checks if not c.ok]

    def to_json(self) -> dict:
        return {
            "ok": self.ok,
            "checks": [{"requirement": c.requirement, "name": c.name, "ok": c.ok, "detail": c.detail}
                       for c in self.checks],
            "warnings": list(self.warnings),
        }


def zone_table(system) -> dict[str, tuple[int, int, dict[str, Perm]]]:
    """Every protected zone with the domains entitled to it and their rights."""
    layout = system.machine.layout
    zones = {
        "REE": (layout.ree.base, layout.ree.length, {REE: Perm.RWX}),
        "SM": (layout.sm.base, layout.sm.length, {}),
        "TH": (layout.th.base, layout.th.length, {TH: Perm.RWX}),
    }
    for desc in system.sm.live_enclaves():
        mem, buf = desc.memory, desc.channel
        zones[f"{desc.domain}/memory"] = (mem.base, mem.length, {desc.domain: Perm.RWX})
        zones[f"{desc.domain}/channel"] = (buf.base, buf.length, {desc.domain: Perm.RW, TH: Perm.RW})
    return zones


def isolation_matrix(system) -> list[Probe]:
    """Probe first, middle and last byte of every zone from every domain with every access kind."""
    domains = [REE, TH] + [d.domain for d in system.sm.live_enclaves()]
    probes = []
    for zone_name, (base, length, rights) in zone_table(system).items():
        addrs = sorted({base, base + length // 2, base + length - 1})
        for domain in domains:
            for access in ACCESS_KINDS:
                expected = access in rights.get(domain, Perm.NONE)
                actual = all(bool(system.sm.access_as(domain, a, 1, access)) for a in addrs)
                probes.append(Probe(domain, zone_name, access, expected, actual))
    return probes


def strict_capacity_probe(system) -> tuple[int, int]:
    """Create enclaves until the SM refuses; returns (created, formula). Leaves no enclave behind."""
    created = []
    try:
        while len(created) < 64:
            created.append(system.sm.enclave_create(b"capacity-probe" + bytes([len(created)])).eid)
    except ResourceExhausted:
        pass
    finally:
        for eid in created:
            system.sm.enclave_destroy(eid)
    return len(created), system.sm.strict_capacity()


def scan_for_secrets(secrets, blobs) -> list[bytes]:
    return [s for s in secrets if any(s in blob for blob in blobs)]


def check_system(system, *, artifacts=(), sweep_enclaves: int = 2) -> InvariantReport:
    report = InvariantReport()
    sm, th, machine = system.sm, system.th, system.machine

    # S3: boot chain and a fresh attestation report
    creds = system.creds
    chain_ok = verify_endorsement_chain(creds.public_parts(), creds.device_pub,
                                        creds.sm_endorsement.subject_hash, creds.th_endorsement.subject_hash)
    report.checks.append(Check("S3", "endorsement-chain", chain_ok))
    if not creds.zsbl_verified:
        report.warnings.append("S3: FSBL was loaded without ZSBL verification")

    # S1: isolation matrix
    if sm.mode is PmpMode.STRICT:
        sweep_enclaves = min(sweep_enclaves, sm.strict_capacity() - len(sm.live_enclaves()))
    made = [sm.enclave_create(b"isolation-probe-%d" % i, f"probe{i}") for i in range(max(sweep_enclaves, 0))]
    try:
        probes = isolation_matrix(system)
        bad = [p for p in probes if not p.ok]
        report.checks.append(Check("S1", "isolation-matrix", not bad,
                                   f"{len(probes)} probes, {len(bad)} exceptions"
                                   + (f"; first: {bad[0]}" if bad else "")))
        if made:
            blob = sm.attest(made[0].eid, b"invariants")
            verdict = verify_report(blob, creds.device_pub, creds.sm_endorsement.subject_hash,
                                    creds.th_endorsement.subject_hash, measure(b"isolation-probe-0"))
            report.checks.append(Check("S3", "attestation-report", verdict.accepted, verdict.reason))
    finally:
        for desc in made:
            sm.enclave_destroy(desc.eid)

    # capacity formula (strict mode only)
    if sm.mode is PmpMode.STRICT and not sm.live_enclaves():
        created, formula = strict_capacity_probe(system)
        report.checks.append(Check("S1", "strict-capacity", created == formula,
                                   f"created {created}, floor((cap-reserved)/4) = {formula}"))

    # S4: peripheral manager never hands a Trusted peripheral to the REE
    violations = th.spm.violations()
    report.checks.append(Check("S4", "spm-soundness", not violations, "; ".join(violations)))

    # S2: no sensitive key material in channel traffic, buffers or artifacts
    pool = machine.layout.channel_pool
    blobs = list(th.traffic) + [machine.memory.read(pool.base, pool.length)] + list(artifacts)
    secrets = th.sensitive_materials()
    leaked = scan_for_secrets(secrets, blobs)
    report.checks.append(Check("S2", "non-extractability", not leaked,
                               f"{len(leaked)} of {len(secrets)} sensitive keys leaked"))

    # DMA bypass is a documented gap unless IOPMP is on
    if not machine.iopmp_enabled:
        report.warnings.append("known gap: bus masters bypass PMP (IOPMP disabled)")
    report.warnings.append("S5: copied session handles keep working (modelled REE weakness)")
    return report
