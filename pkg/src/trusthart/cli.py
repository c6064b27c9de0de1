"""Command-line front end: ``trusthart run | verify | invariants``.

Exit codes: 0 success, 1 rejected report or violated invariant,
2 invalid config or unreadable/malformed input, 3 boot failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

from .config import ScenarioConfig
from .crypto import measure
from .errors import BootFailure, ConfigError, MalformedReport, PoolExhausted, ResourceExhausted
from .invariants import check_system
from .monitor import PmpMode
from .system import System
from .th.report import verify_report
from .workloads.scenarios import ScenarioMode, run_scenario_ec_keygen, run_scenario_ecdh

EXIT_OK, EXIT_REJECT, EXIT_INPUT, EXIT_BOOT = 0, 1, 2, 3

TABLE_ROWS = (("ec_keygen", "EC key generation (ms)"), ("ecdh", "ECDH exchange (ms)"))


@dataclass
class RunReport:
    boot: dict
    scenarios: list[dict] = field(default_factory=list)
    invariants: dict = field(default_factory=dict)
    artifacts: list[str] = field(default_factory=list)
    system: System | None = field(default=None, repr=False, compare=False)

    def to_json(self) -> dict:
        return {"boot": self.boot, "scenarios": self.scenarios, "invariants": self.invariants,
                "artifacts": self.artifacts}


def boot_system(cfg: ScenarioConfig) -> System:
    return System.boot(
        cfg.boot_images(), config=cfg.machine, seed=cfg.seed, pmp_mode=cfg.pmp_mode,
        boot_mode=cfg.boot_mode, th_costs=cfg.costs.th_costs(), peripherals=cfg.peripheral_table(),
        keystore_policy=cfg.keystore_kinds(), enclave_size=cfg.enclave_size,
    )


def apply_overrides(cfg: ScenarioConfig, seed=None, pmp_mode=None, iopmp=None) -> ScenarioConfig:
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if pmp_mode is not None:
        cfg = replace(cfg, pmp_mode=PmpMode(pmp_mode))
    if iopmp is not None:
        cfg = replace(cfg, machine=replace(cfg.machine, iopmp=iopmp))
    return cfg


def _capacity(system: System, image: bytes) -> dict:
    created, reason = [], ""
    try:
        while len(created) < 256:
            created.append(system.sm.enclave_create(image, f"capacity{len(created)}").eid)
    except (ResourceExhausted, PoolExhausted) as exc:
        reason = type(exc).__name__
    finally:
        for eid in created:
            system.sm.enclave_destroy(eid)
    return {"name": "capacity", "pmp_mode": system.sm.mode.value, "live_enclaves": len(created),
            "stopped_by": reason}


def timing_table(scenarios: list[dict]) -> str:
    cells = {(s["name"], s["mode"]): s for s in scenarios if "latency_ms" in s}
    header = ["operation", "enclave_alone", "enclave_and_th", "of_which_th"]
    rows = [header]
    for key, label in TABLE_ROWS:
        alone = cells.get((key, ScenarioMode.ENCLAVE_ALONE.value))
        with_th = cells.get((key, ScenarioMode.ENCLAVE_AND_TH.value))
        if alone is None and with_th is None:
            continue
        rows.append([label,
                     str(alone["latency_ms"]) if alone else "-",
                     str(with_th["latency_ms"]) if with_th else "-",
                     str(with_th["th_ms"]) if with_th else "-"])
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    return "".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() + "\n" for r in rows)


def cmd_run(cfg: ScenarioConfig, out_dir: Path | str) -> RunReport:
    """Boot, run every workload and write artifacts; raises BootFailure or ConfigError."""
    out = Path(out_dir)
    system = boot_system(cfg)
    creds = system.creds
    enclave_image = cfg.enclave_image()
    report = RunReport(boot={
        "ok": True,
        "zsbl_verified": creds.zsbl_verified,
        "pmp_mode": system.sm.mode.value,
        "iopmp": system.machine.iopmp_enabled,
        "sm_hash": creds.sm_endorsement.subject_hash.hex(),
        "th_hash": creds.th_endorsement.subject_hash.hex(),
        "device_pub": creds.device_pub.hex(),
    })
    artifacts: dict[str, bytes] = {}

    for workload in cfg.workloads:
        name = workload["scenario"]
        if name in ("ec_keygen", "ecdh"):
            runner = run_scenario_ec_keygen if name == "ec_keygen" else run_scenario_ecdh
            for mode in workload.get("modes", [m.value for m in ScenarioMode]):
                r = runner(system, mode, cfg.costs, image=enclave_image)
                report.scenarios.append({"name": r.name, "mode": r.mode.value, "latency_ms": r.latency_ms,
                                         "th_ms": r.th_ms, "entries": r.entries, "ok": r.ok})
        elif name == "capacity":
            report.scenarios.append(_capacity(system, enclave_image))
        elif name == "attestation":
            desc = system.sm.enclave_create(enclave_image, "attestation")
            artifacts["attestation.bin"] = system.sm.attest(desc.eid, cfg.attestation_data)
            system.sm.enclave_destroy(desc.eid)
            report.scenarios.append({"name": "attestation", "report_size": len(artifacts["attestation.bin"]),
                                     "data_len": len(cfg.attestation_data)})

    credentials = dict(creds.public_parts().to_json())
    credentials.update(device_pub=creds.device_pub.hex(), enclave_hash=measure(enclave_image).hex(),
                       attestation_data=cfg.attestation_data.hex())
    artifacts["credentials.json"] = _json_bytes(credentials)
    artifacts["timing.txt"] = timing_table(report.scenarios).encode()

    inv = check_system(system, artifacts=list(artifacts.values()))
    report.invariants = inv.to_json()

    artifacts["run.log"] = "".join(e.line() + "\n" for e in system.machine.trace).encode()
    report.artifacts = sorted(list(artifacts) + ["results.json"])
    artifacts["results.json"] = _json_bytes(report.to_json())
    report.system = system

    out.mkdir(parents=True, exist_ok=True)
    for name, data in artifacts.items():
        (out / name).write_bytes(data)
    return report


def _json_bytes(obj) -> bytes:
    return (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode()


def cmd_verify(report_path, device_pub: str, sm_hash: str, th_hash: str, enclave_hash: str,
               expected_data: str | None = None) -> int:
    try:
        blob = Path(report_path).read_bytes()
    except OSError as exc:
        print(f"error: cannot read report: {exc.strerror}", file=sys.stderr)
        return EXIT_INPUT
    try:
        pub = bytes.fromhex(device_pub)
        hashes = [bytes.fromhex(h) for h in (sm_hash, th_hash, enclave_hash)]
        data = None if expected_data is None else bytes.fromhex(expected_data)
    except ValueError as exc:
        print(f"error: bad hex argument ({exc})", file=sys.stderr)
        return EXIT_INPUT
    if len(pub) != 32 or any(len(h) != 64 for h in hashes):
        print("error: device key must be 32 bytes and hashes 64 bytes", file=sys.stderr)
        return EXIT_INPUT
    try:
        verdict = verify_report(blob, pub, *hashes, expected_data=data)
    except MalformedReport as exc:
        print(f"error: malformed report: {exc}", file=sys.stderr)
        return EXIT_INPUT
    if verdict.accepted:
        print("accept")
        return EXIT_OK
    print(f"reject layer={verdict.layer.value}: {verdict.reason}")
    return EXIT_REJECT


def cmd_invariants(cfg: ScenarioConfig) -> int:
    system = boot_system(cfg)
    run_scenario_ecdh(system, ScenarioMode.ENCLAVE_AND_TH, cfg.costs, image=cfg.enclave_image())
    result = check_system(system)
    for c in result.checks:
        print(f"{c.requirement} {c.name}: {'ok' if c.ok else 'VIOLATED'}" + (f" ({c.detail})" if c.detail else ""))
    for w in result.warnings:
        print(f"warning: {w}")
    if not result.ok:
        ids = sorted({c.requirement for c in result.failed()})
        print("violated: " + " ".join(ids))
        return EXIT_REJECT
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trusthart", description="Trusted Hart TEE simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="boot and run the configured workloads")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--pmp-mode", choices=[m.value for m in PmpMode])
    run.add_argument("--iopmp", action="store_true", default=None)
    run.add_argument("--entropy", action="store_true", help="seed from the OS instead of the config")

    verify = sub.add_parser("verify", help="verify an attestation report")
    verify.add_argument("--report", required=True)
    verify.add_argument("--device-pub", required=True)
    verify.add_argument("--sm-hash", required=True)
    verify.add_argument("--th-hash", required=True)
    verify.add_argument("--enclave-hash", required=True)
    verify.add_argument("--data", help="expected user data (hex)")

    inv = sub.add_parser("invariants", help="run the isolation/SPM/capacity sweep")
    inv.add_argument("--config", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    if args.command == "verify":
        return cmd_verify(args.report, args.device_pub, args.sm_hash, args.th_hash, args.enclave_hash, args.data)
    try:
        cfg = ScenarioConfig.load(args.config)
        if args.command == "run":
            seed = int.from_bytes(os.urandom(32), "big") if args.entropy else args.seed
            cfg = apply_overrides(cfg, seed, args.pmp_mode, args.iopmp)
            report = cmd_run(cfg, args.out)
            sys.stdout.write(timing_table(report.scenarios))
            return EXIT_OK if report.invariants["ok"] else EXIT_REJECT
        return cmd_invariants(cfg)
    except ConfigError as exc:
        print(f"error: invalid config: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except BootFailure as exc:
        print(f"boot failure: stage={exc.stage.value if hasattr(exc.stage, 'value') else exc.stage}"
              + (f": {exc.reason}" if exc.reason else ""), file=sys.stderr)
        return EXIT_BOOT


if __name__ == "__main__":
    sys.exit(main())
