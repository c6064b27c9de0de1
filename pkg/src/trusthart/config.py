"""Scenario configuration: YAML on disk, validated against a JSON Schema."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import yaml

from .boot import BootImage, BootMode, Stage
from .crypto import Measurement, measure
from .errors import ConfigError
from .machine import MachineConfig
from .monitor import PmpMode
from .th.keystore import KeyKind
from .th.spm import REE, TH, PeripheralClass, PeripheralDescriptor, PeripheralPolicy
from .workloads.scenarios import CostModel

_HASH_REF = {"type": "string", "pattern": "^([0-9a-f]{128}|image:[a-z_]+)$"}
_COUNT = {"type": "integer", "minimum": 0}

SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "trusthart scenario configuration",
    "type": "object",
    "additionalProperties": False,
    "required": ["images"],
    "properties": {
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**256 - 1},
        "machine": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "harts": {"type": "integer", "minimum": 3},
                "pmp_capacity": {"type": "integer", "minimum": 4, "maximum": 64},
                "pmp_reserved": {"type": "integer", "minimum": 2},
                "memory_size": {"type": "integer", "minimum": 1},
                "slice_ms": {"type": "integer", "minimum": 1},
                "iopmp": {"type": "boolean"},
                "th_ipi": {"type": "boolean"},
                "channel_buffers": {"type": "integer", "minimum": 1},
                "epm_size": {"type": "integer", "minimum": 1},
            },
        },
        "pmp_mode": {"enum": ["strict", "cache"]},
        "boot_mode": {"enum": ["verified", "unverified_zsbl"]},
        "enclave_size": {"type": "integer", "minimum": 4096},
        "images": {
            "type": "object",
            "additionalProperties": False,
            "required": ["fsbl", "sm", "th", "ree", "enclave"],
            "properties": {k: {"type": "string"} for k in ("fsbl", "sm", "th", "ree", "enclave")},
        },
        "peripherals": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["id", "name", "class"],
                "properties": {
                    "id": {"type": "integer", "minimum": 0, "maximum": 65535},
                    "name": {"type": "string"},
                    "class": {"enum": [c.value for c in PeripheralClass]},
                    "user": {"enum": ["enclave", "TH"]},
                    "allow": {"type": "array", "items": _HASH_REF},
                    "th_allowed": {"type": "boolean"},
                    "assigned": {"enum": [None, "REE", "TH"]},
                },
            },
        },
        "keystore_policy": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["enclave", "kinds"],
                "properties": {
                    "enclave": _HASH_REF,
                    "kinds": {"type": "array", "items": {"enum": [k.name.lower() for k in KeyKind]}},
                },
            },
        },
        "costs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: _COUNT for k in
                           ("ec_keygen_enclave_ms", "ecdh_enclave_ms", "ec_keygen_th_ms", "ecdh_th_ms")},
        },
        "attestation_data": {"type": "string", "pattern": "^([0-9a-f]{2})*$", "maxLength": 2048},
        "workloads": {
            "type": "array",
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["scenario"],
                "properties": {
                    "scenario": {"enum": ["ec_keygen", "ecdh", "capacity", "attestation"]},
                    "modes": {"type": "array", "items": {"enum": ["enclave_alone", "enclave_and_th"]}},
                },
            },
        },
    },
}

DEFAULT_WORKLOADS = [
    {"scenario": "ec_keygen", "modes": ["enclave_alone", "enclave_and_th"]},
    {"scenario": "ecdh", "modes": ["enclave_alone", "enclave_and_th"]},
    {"scenario": "attestation"},
]


@dataclass
class ScenarioConfig:
    seed: int
    machine: MachineConfig
    pmp_mode: PmpMode
    boot_mode: BootMode
    images: dict[str, Path]
    peripherals: list[dict] = field(default_factory=list)
    keystore_policy: list[dict] = field(default_factory=list)
    costs: CostModel = field(default_factory=CostModel)
    workloads: list[dict] = field(default_factory=lambda: [dict(w) for w in DEFAULT_WORKLOADS])
    attestation_data: bytes = b""
    enclave_size: int | None = None

    # -- loading -------------------------------------------------------------------------

    @classmethod
    def from_dict(cls, raw: dict, base_dir: Path | str = ".") -> "ScenarioConfig":
        try:
            jsonschema.validate(raw, SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
            raise ConfigError(f"{where}: {exc.message}") from None
        base_dir = Path(base_dir)
        m = dict(raw.get("machine", {}))
        slice_ms = m.get("slice_ms", 100)
        try:
            machine = MachineConfig(**m)
            costs = CostModel(slice_ms=slice_ms).with_overrides(**raw.get("costs", {}))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        return cls(
            seed=raw.get("seed", 0),
            machine=machine,
            pmp_mode=PmpMode(raw.get("pmp_mode", "strict")),
            boot_mode=BootMode(raw.get("boot_mode", "verified")),
            images={k: base_dir / v for k, v in raw["images"].items()},
            peripherals=list(raw.get("peripherals", [])),
            keystore_policy=list(raw.get("keystore_policy", [])),
            costs=costs,
            workloads=list(raw.get("workloads", DEFAULT_WORKLOADS)),
            attestation_data=bytes.fromhex(raw.get("attestation_data", "")),
            enclave_size=raw.get("enclave_size"),
        )

    @classmethod
    def load(cls, path: Path | str) -> "ScenarioConfig":
        path = Path(path)
        try:
            raw = yaml.safe_load(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        return cls.from_dict(raw, path.parent)

    # -- materialisation -----------------------------------------------------------------

    def _read(self, key: str) -> bytes:
        try:
            return self.images[key].read_bytes()
        except OSError as exc:
            raise ConfigError(f"image {key}: {exc.strerror}: {self.images[key].name}") from None

    def boot_images(self) -> list[BootImage]:
        stages = {"fsbl": Stage.FSBL, "sm": Stage.SM, "th": Stage.TH, "ree": Stage.REE}
        out = []
        for key, stage in stages.items():
            self._read(key)
            try:
                out.append(BootImage.from_file(stage, self.images[key]))
            except ValueError as exc:
                raise ConfigError(f"image {key}: bad reference hash ({exc})") from None
        return out

    def enclave_image(self) -> bytes:
        return self._read("enclave")

    def resolve_hash(self, ref: str) -> Measurement:
        if ref.startswith("image:"):
            key = ref.split(":", 1)[1]
            if key not in self.images:
                raise ConfigError(f"unknown image reference {ref!r}")
            return measure(self._read(key))
        return Measurement.fromhex(ref)

    def peripheral_table(self) -> list[PeripheralDescriptor]:
        table = []
        for p in self.peripherals:
            policy = PeripheralPolicy(
                user=p.get("user", "enclave"),
                allow=frozenset(self.resolve_hash(h) for h in p.get("allow", [])),
                th_allowed=p.get("th_allowed", True),
            )
            assigned = {None: None, "REE": REE, "TH": TH}[p.get("assigned")]
            table.append(PeripheralDescriptor(p["id"], p["name"], PeripheralClass(p["class"]), assigned, policy))
        if len({p.id for p in table}) != len(table):
            raise ConfigError("peripheral ids must be unique")
        return table

    def keystore_kinds(self) -> dict[Measurement, set[KeyKind]] | None:
        if not self.keystore_policy:
            return None
        return {self.resolve_hash(e["enclave"]): {KeyKind[k.upper()] for k in e["kinds"]}
                for e in self.keystore_policy}
