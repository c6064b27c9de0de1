import json
import shutil

import pytest
import yaml

from trusthart import cli
from trusthart.config import SCHEMA, ScenarioConfig
from trusthart.errors import BootFailure, ConfigError
from trusthart.invariants import check_system, isolation_matrix
from trusthart.monitor import PmpMode

from conftest import ROOT, SCENARIOS, boot

DEFAULT = SCENARIOS / "default.yaml"


def _raw():
    return yaml.safe_load(DEFAULT.read_text())


def _write(tmp_path, raw, name="cfg.yaml"):
    shutil.copytree(SCENARIOS / "images", tmp_path / "images", dirs_exist_ok=True)
    path = tmp_path / name
    path.write_text(yaml.safe_dump(raw))
    return path


def test_published_schema_in_sync():
    published = json.loads((ROOT / "docs" / "config.schema.json").read_text())
    assert published == json.loads(json.dumps(SCHEMA))


def test_default_config_loads():
    cfg = ScenarioConfig.load(DEFAULT)
    assert cfg.seed == 42 and cfg.pmp_mode is PmpMode.STRICT
    assert cfg.machine.pmp_capacity == 8 and cfg.costs.ecdh_th_ms == 23
    assert len(cfg.peripheral_table()) == 3
    assert cfg.keystore_kinds()


@pytest.mark.parametrize("mutate", [
    lambda r: r.update(bogus=1),
    lambda r: r["machine"].update(turbo=True),
    lambda r: r.update(pmp_mode="lazy"),
    lambda r: r["peripherals"][0].update(**{"class": "Secret"}),
    lambda r: r["costs"].update(ecdh_th_ms=-3),
    lambda r: r.pop("images"),
    lambda r: r["machine"].update(memory_size=1024),
    lambda r: r.update(attestation_data="zz"),
])
def test_invalid_configs_rejected(mutate):
    raw = _raw()
    mutate(raw)
    with pytest.raises(ConfigError):
        ScenarioConfig.from_dict(raw, SCENARIOS)


def test_missing_image_is_config_error(tmp_path):
    raw = _raw()
    raw["images"]["th"] = "images/nope.bin"
    cfg = ScenarioConfig.from_dict(raw, SCENARIOS)
    with pytest.raises(ConfigError):
        cfg.boot_images()


def test_run_exit_codes(tmp_path, capsys):
    assert cli.main(["run", "--config", str(DEFAULT), "--out", str(tmp_path / "a")]) == 0
    table = capsys.readouterr().out
    assert "EC key generation (ms)  12" in table
    assert cli.main(["run", "--config", str(SCENARIOS / "tampered_sm.yaml"), "--out", str(tmp_path / "b")]) == 3
    assert "stage=SM" in capsys.readouterr().err
    assert cli.main(["run", "--config", str(tmp_path / "missing.yaml"), "--out", str(tmp_path / "c")]) == 2
    bad = _write(tmp_path, {**_raw(), "unknown_key": 1})
    assert cli.main(["run", "--config", str(bad), "--out", str(tmp_path / "d")]) == 2


def test_run_artifacts(tmp_path):
    out = tmp_path / "run"
    report = cli.cmd_run(ScenarioConfig.load(DEFAULT), out)
    assert sorted(p.name for p in out.iterdir()) == report.artifacts
    results = json.loads((out / "results.json").read_text())
    assert results["boot"]["ok"] and results["invariants"]["ok"]
    assert str(tmp_path) not in (out / "results.json").read_text()
    cap = next(s for s in results["scenarios"] if s["name"] == "capacity")
    assert cap["live_enclaves"] == 1


def test_run_overrides(tmp_path, capsys):
    assert cli.main(["run", "--config", str(DEFAULT), "--out", str(tmp_path / "o"), "--seed", "5",
                     "--pmp-mode", "cache", "--iopmp"]) == 0
    results = json.loads((tmp_path / "o" / "results.json").read_text())
    assert results["boot"]["pmp_mode"] == "cache" and results["boot"]["iopmp"]
    cap = next(s for s in results["scenarios"] if s["name"] == "capacity")
    assert cap["live_enclaves"] == 16 and cap["stopped_by"] == "PoolExhausted"
    assert not any("IOPMP" in w for w in results["invariants"]["warnings"])


def test_pmp16_runs_three_enclaves(tmp_path):
    report = cli.cmd_run(ScenarioConfig.load(SCENARIOS / "pmp16.yaml"), tmp_path)
    cap = next(s for s in report.scenarios if s["name"] == "capacity")
    assert cap["live_enclaves"] == 3


def test_verify_exit_codes(tmp_path, capsys):
    out = tmp_path / "run"
    cli.cmd_run(ScenarioConfig.load(DEFAULT), out)
    creds = json.loads((out / "credentials.json").read_text())
    args = ["verify", "--report", str(out / "attestation.bin"), "--device-pub", creds["device_pub"],
            "--sm-hash", creds["sm_hash"], "--th-hash", creds["th_hash"]]
    assert cli.main(args + ["--enclave-hash", creds["enclave_hash"]]) == 0
    assert cli.main(args + ["--enclave-hash", creds["enclave_hash"], "--data", creds["attestation_data"]]) == 0
    assert cli.main(args + ["--enclave-hash", creds["sm_hash"]]) == 1
    assert "layer=iii" in capsys.readouterr().out
    trunc = tmp_path / "trunc.bin"
    trunc.write_bytes((out / "attestation.bin").read_bytes()[:200])
    args[2] = str(trunc)
    assert cli.main(args + ["--enclave-hash", creds["enclave_hash"]]) == 2
    args[2] = str(tmp_path / "absent.bin")
    assert cli.main(args + ["--enclave-hash", creds["enclave_hash"]]) == 2
    assert cli.main(["verify", "--report", str(out / "attestation.bin"), "--device-pub", "zz", "--sm-hash", "00",
                     "--th-hash", "00", "--enclave-hash", "00"]) == 2


def test_invariants_command(capsys):
    assert cli.main(["invariants", "--config", str(DEFAULT)]) == 0
    capsys.readouterr()
    assert cli.main(["invariants", "--config", str(SCENARIOS / "broken_spm.yaml")]) == 1
    assert "violated: S4" in capsys.readouterr().out


def test_invariants_warn_on_dma_gap(capsys):
    cli.main(["invariants", "--config", str(DEFAULT)])
    out = capsys.readouterr().out
    assert "warning: known gap: bus masters bypass PMP" in out


def test_boot_failure_surfaces_stage():
    cfg = ScenarioConfig.load(SCENARIOS / "tampered_sm.yaml")
    with pytest.raises(BootFailure) as info:
        cli.boot_system(cfg)
    assert info.value.stage.value == "SM"


def test_isolation_matrix_two_enclaves():
    s = boot(pmp_mode="cache")
    s.sm.enclave_create(b"one")
    s.sm.enclave_create(b"two")
    probes = isolation_matrix(s)
    domains = {p.domain for p in probes}
    zones = {p.zone for p in probes}
    assert len(domains) == 4 and len(zones) == 7
    assert len(probes) == len(domains) * len(zones) * 3
    assert all(p.ok for p in probes)


def test_check_system_reports_spm_violation():
    s = boot()
    from trusthart.th.spm import PeripheralClass, PeripheralDescriptor
    s.th.spm.peripherals[5] = PeripheralDescriptor(5, "fp", PeripheralClass.TRUSTED, assignment="REE")
    report = check_system(s)
    assert [c.requirement for c in report.failed()] == ["S4"]
