"""Wiring: build a machine, run secure boot and start the TH and SM."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .boot import BootCredentials, BootImage, BootMode, Stage, run_boot
from .crypto import SEED_SIZE, Drbg, measure
from .machine import Machine, MachineConfig
from .monitor import PmpMode, SecureMonitor
from .th.service import TrustedHart


def seed_bytes(seed: int | bytes) -> bytes:
    if isinstance(seed, bytes):
        return seed
    return seed.to_bytes(SEED_SIZE, "big")


@dataclass
class System:
    machine: Machine
    creds: BootCredentials
    th: TrustedHart
    sm: SecureMonitor
    images: list[BootImage]
    options: dict = field(default_factory=dict)

    @classmethod
    def boot(cls, images, *, config: MachineConfig | None = None, seed: int | bytes = 0,
             pmp_mode: PmpMode | str = PmpMode.STRICT, boot_mode: BootMode = BootMode.VERIFIED,
             th_costs=None, peripherals=(), keystore_policy=None, enclave_size: int | None = None,
             machine: Machine | None = None) -> "System":
        images = list(images)
        if machine is None:
            fsbl = next(img for img in images if img.stage is Stage.FSBL)
            trust_root = fsbl.expected_hash or measure(fsbl.code)
            machine = Machine(config, seed_bytes(seed), trust_root)
        creds = run_boot(machine, images, boot_mode)
        th = TrustedHart(machine, creds, peripherals=[replace(p) for p in peripherals],
                         keystore_policy=keystore_policy, costs=th_costs)
        kwargs = {"enclave_size": enclave_size} if enclave_size else {}
        sm = SecureMonitor(machine, creds, th, pmp_mode, **kwargs)
        options = dict(pmp_mode=pmp_mode, boot_mode=boot_mode, th_costs=th_costs, peripherals=peripherals,
                       keystore_policy=keystore_policy, enclave_size=enclave_size)
        return cls(machine, creds, th, sm, images, options)

    def reboot(self) -> "System":
        """Power-cycle the same machine and boot it again with the same images."""
        self.machine.power_cycle()
        return System.boot(self.images, machine=self.machine, **self.options)

    def enclave_rng(self, label: bytes) -> Drbg:
        return Drbg(self.machine.otp.device_key_seed).fork(b"enclave-runtime:" + label)
