"""Measured secure boot: ZSBL -> FSBL -> SM -> TH.

Each stage measures the next, derives that stage's attestation key and
endorses ``measurement || public key`` with its own key. The chain is
rooted in the device key held in OTP.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

from . import crypto
from .crypto import Drbg, Measurement, SigningKeypair, measure
from .errors import BootFailure
from .machine import Machine, Mode, PmpEntry, Perm, Role

ENDORSEMENT_SIZE = crypto.MEASUREMENT_SIZE + crypto.PUBLIC_KEY_SIZE + crypto.SIGNATURE_SIZE
IMAGE_OFFSET = 0x1000


class Stage(enum.Enum):
    FSBL = "FSBL"
    SM = "SM"
    TH = "TH"
    REE = "REE"


class BootMode(enum.Enum):
    VERIFIED = "verified"
    UNVERIFIED_ZSBL = "unverified_zsbl"


class Signer(enum.Enum):
    DEVICE = "device"
    SM = "SM"


@dataclass(frozen=True)
class BootImage:
    stage: Stage
    code: bytes
    expected_hash: Measurement | None = None

    def __post_init__(self):
        if self.stage is Stage.REE and self.expected_hash is not None:
            raise ValueError("REE images are never verified and carry no expected hash")

    @classmethod
    def from_file(cls, stage: Stage, path: str | Path) -> "BootImage":
        """Load an image; the reference hash comes from a ``<path>.sha512`` sidecar."""
        path = Path(path)
        expected = None
        sidecar = path.with_name(path.name + ".sha512")
        if stage is not Stage.REE and sidecar.exists():
            expected = Measurement.fromhex(sidecar.read_text().split()[0])
        return cls(stage, path.read_bytes(), expected)


@dataclass(frozen=True)
class Endorsement:
    subject_hash: Measurement
    subject_pub: bytes
    signature: bytes
    signer: Signer

    @staticmethod
    def message(subject_hash: Measurement, subject_pub: bytes) -> bytes:
        return subject_hash.digest + subject_pub

    @classmethod
    def create(cls, signer_key: SigningKeypair, subject_hash: Measurement, subject_pub: bytes,
               signer: Signer) -> "Endorsement":
        sig = crypto.sign(signer_key, cls.message(subject_hash, subject_pub))
        return cls(subject_hash, subject_pub, sig, signer)

    def verify(self, signer_pub: bytes) -> bool:
        return crypto.verify(signer_pub, self.message(self.subject_hash, self.subject_pub), self.signature)

    def encode(self) -> bytes:
        return self.subject_hash.digest + self.subject_pub + self.signature

    @classmethod
    def decode(cls, data: bytes, signer: Signer) -> "Endorsement":
        if len(data) != ENDORSEMENT_SIZE:
            raise ValueError(f"endorsement must be {ENDORSEMENT_SIZE} bytes")
        return cls(Measurement(data[:64]), data[64:96], data[96:160], signer)


@dataclass(frozen=True)
class CredentialsPublic:
    device_pub: bytes
    sm_endorsement: Endorsement
    th_endorsement: Endorsement

    def to_json(self) -> dict:
        return {
            "device_pub": self.device_pub.hex(),
            "sm_hash": self.sm_endorsement.subject_hash.hex(),
            "sm_pub": self.sm_endorsement.subject_pub.hex(),
            "sgn_d": self.sm_endorsement.signature.hex(),
            "th_hash": self.th_endorsement.subject_hash.hex(),
            "th_pub": self.th_endorsement.subject_pub.hex(),
            "sgn_sm": self.th_endorsement.signature.hex(),
        }


@dataclass(frozen=True)
class BootCredentials:
    sm_keypair: SigningKeypair
    sm_endorsement: Endorsement
    th_keypair: SigningKeypair
    th_endorsement: Endorsement
    device_pub: bytes
    storage_key: bytes = field(default=b"", repr=False)
    zsbl_verified: bool = True

    def public_parts(self) -> CredentialsPublic:
        return CredentialsPublic(self.device_pub, self.sm_endorsement, self.th_endorsement)

    def for_th(self) -> "BootCredentials":
        """What the TH keeps after hand-off: no SM private key."""
        return BootCredentials(
            SigningKeypair(b"", self.sm_keypair.public), self.sm_endorsement,
            self.th_keypair, self.th_endorsement, self.device_pub, self.storage_key, self.zsbl_verified,
        )


def verify_endorsement_chain(public: CredentialsPublic, device_pub: bytes,
                             expected_sm_hash: Measurement, expected_th_hash: Measurement) -> bool:
    sm_end, th_end = public.sm_endorsement, public.th_endorsement
    return (
        sm_end.verify(device_pub)
        and sm_end.subject_hash == expected_sm_hash
        and th_end.verify(sm_end.subject_pub)
        and th_end.subject_hash == expected_th_hash
    )


def _by_stage(images) -> dict[Stage, BootImage]:
    found = {img.stage: img for img in images}
    for stage in (Stage.FSBL, Stage.SM, Stage.TH):
        if stage not in found:
            raise BootFailure(stage, "image missing")
    return found


def _check_reference(image: BootImage, actual: Measurement) -> None:
    if image.expected_hash is None:
        raise BootFailure(image.stage, "no reference measurement")
    if actual != image.expected_hash:
        raise BootFailure(image.stage, "measurement mismatch")


def run_boot(machine: Machine, images, mode: BootMode = BootMode.VERIFIED) -> BootCredentials:
    """Run boot steps (1)-(10) on hart 0 and launch the TH on hart 1."""
    staged = _by_stage(images)
    layout = machine.layout
    boot_hart = machine.hart(0)
    log = lambda kind, detail="": machine.log(kind, detail, hart=boot_hart.id)  # noqa: E731

    # (1) ZSBL measures and loads the FSBL
    sha_fsbl = measure(staged[Stage.FSBL].code)
    if mode is BootMode.VERIFIED:
        root = machine.otp.trust_root_hash
        if root is None or root != sha_fsbl:
            log("boot-fail", "FSBL does not match OTP trust root")
            raise BootFailure(Stage.FSBL, "trust root mismatch")
        log("zsbl", f"FSBL verified {sha_fsbl.hex()[:16]}")
    else:
        log("zsbl", "FSBL loaded unverified")

    # (2) FSBL measures the SM
    sha_sm = measure(staged[Stage.SM].code)
    _check_reference(staged[Stage.SM], sha_sm)
    log("fsbl", f"SM measured {sha_sm.hex()[:16]}")

    # (3)-(4) fresh SM attestation key, endorsed by the device key
    device_rng = Drbg(machine.otp.device_key_seed)
    device_key = crypto.keygen_sign(device_rng, b"device")
    sm_rng = device_rng.fork(b"SM" + sha_sm.digest)
    sm_key = crypto.keygen_sign(sm_rng, b"SM" + sha_sm.digest)
    sm_end = Endorsement.create(device_key, sha_sm, sm_key.public, Signer.DEVICE)
    storage_key = device_rng.derive(b"TH-storage")
    log("fsbl", "SM attestation key endorsed")

    # (5) hand SM key + endorsement to the SM private memory
    machine.memory.write(layout.sm.base, sm_key.private + sm_key.public + sm_end.encode())
    machine.memory.write(layout.sm.base + IMAGE_OFFSET, staged[Stage.SM].code)
    device_pub = device_key.public
    del device_key

    # (6) SM measures the TH
    sha_th = measure(staged[Stage.TH].code)
    _check_reference(staged[Stage.TH], sha_th)
    log("sm", f"TH measured {sha_th.hex()[:16]}")

    # (7)-(8) fresh TH attestation key, endorsed by the SM key
    th_key = crypto.keygen_sign(sm_rng, b"TH" + sha_th.digest)
    th_end = Endorsement.create(sm_key, sha_th, th_key.public, Signer.SM)
    log("sm", "TH attestation key endorsed")

    # (9) hand TH key + both endorsements to the TH private memory
    machine.memory.write(
        layout.th.base,
        th_key.private + th_key.public + th_end.encode() + sm_end.encode() + storage_key,
    )
    machine.memory.write(layout.th.base + IMAGE_OFFSET, staged[Stage.TH].code)

    # (10) launch TH on hart 1, REE on the rest, halt hart 0
    ree = staged.get(Stage.REE)
    if ree is not None:
        machine.memory.write(layout.ree.base, ree.code[: layout.ree.length])
    _launch(machine)
    log("launch", "TH on hart 1, REE on harts 2..")

    return BootCredentials(
        sm_keypair=sm_key,
        sm_endorsement=sm_end,
        th_keypair=th_key,
        th_endorsement=th_end,
        device_pub=device_pub,
        storage_key=storage_key,
        zsbl_verified=mode is BootMode.VERIFIED,
    )


def _launch(machine: Machine) -> None:
    layout = machine.layout
    mem = machine.memory
    for name, region in (("SM", layout.sm), ("TH", layout.th), ("channel-pool", layout.channel_pool),
                         ("REE", layout.ree)):
        mem.claim(region.base, region.length, name)

    for hart in machine.harts:
        hart.pmp.clear()
        hart.context = {}
        if hart.id == 0:
            hart.role, hart.mode, hart.domain = Role.HALTED, Mode.M, ""
        elif hart.id == 1:
            hart.role, hart.mode, hart.domain = Role.TRUSTED, Mode.S, "TH"
            hart.pmp.install_system(PmpEntry(layout.th.base, layout.th.length, Perm.RWX, tag="TH"))
            hart.pmp.install(PmpEntry(layout.channel_pool.base, layout.channel_pool.length, Perm.RW,
                                      tag="channel-pool"))
        else:
            hart.role, hart.mode, hart.domain = Role.NORMAL, Mode.S, "REE"
            hart.pmp.install_system(PmpEntry(layout.ree.base, layout.ree.length, Perm.RWX, tag="REE"))
    machine.booted = True
