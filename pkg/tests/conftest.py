import sys
from pathlib import Path

import pytest

from trusthart.boot import BootImage, Stage
from trusthart.machine import MachineConfig
from trusthart.system import System

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
IMAGES = SCENARIOS / "images"

STAGE_FILES = {Stage.FSBL: "fsbl.bin", Stage.SM: "sm.bin", Stage.TH: "th.bin", Stage.REE: "ree.bin"}


def load_images(**overrides) -> list[BootImage]:
    """Honest images from the fixture directory; ``sm=b"..."`` swaps in different code."""
    out = []
    for stage, name in STAGE_FILES.items():
        img = BootImage.from_file(stage, IMAGES / name)
        code = overrides.get(stage.name.lower())
        out.append(img if code is None else BootImage(stage, code, img.expected_hash))
    return out


def boot(seed=1, **kwargs) -> System:
    config = kwargs.pop("config", None) or MachineConfig(**kwargs.pop("machine", {}))
    return System.boot(load_images(), config=config, seed=seed, **kwargs)


@pytest.fixture
def images():
    return load_images()


@pytest.fixture
def system():
    return boot()


@pytest.fixture
def enclave_image():
    return (IMAGES / "enclave.bin").read_bytes()


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(results):
        terminalreporter.write_line(results[cid][1])
