"""PKCS#11-style token workload and the timing scenarios built on it.

The token either does its EC work inside the enclave ("enclave alone") or
keeps a sensitive EC key in the TH and only does symmetric crypto itself
("enclave and TH"). Costs are declared virtual milliseconds.
"""

from __future__ import annotations

import enum
import hashlib
import struct
from dataclasses import dataclass, field, replace

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .. import crypto
from ..th.keystore import KeyKind
from ..th.messages import MsgKind
from .program import Compute, EnclaveContext, EnclaveProgram, PollTh, Return, ThRequest
from .ree import ReeClient

TOKEN_IMAGE = b"\x7fTA pkcs11-token v1\n" + bytes(range(256)) * 4


class ScenarioMode(str, enum.Enum):
    ENCLAVE_ALONE = "enclave_alone"
    ENCLAVE_AND_TH = "enclave_and_th"


@dataclass(frozen=True)
class CostModel:
    ec_keygen_enclave_ms: int = 12
    ecdh_enclave_ms: int = 48
    ec_keygen_th_ms: int = 12
    ecdh_th_ms: int = 23
    slice_ms: int = 100

    def __post_init__(self):
        if min(self.ec_keygen_enclave_ms, self.ecdh_enclave_ms, self.ec_keygen_th_ms, self.ecdh_th_ms) < 0:
            raise ValueError("costs must be >= 0")
        if self.slice_ms <= 0:
            raise ValueError("slice_ms must be > 0")

    def th_costs(self) -> dict[MsgKind, int]:
        return {MsgKind.KEY_GEN: self.ec_keygen_th_ms, MsgKind.KEY_USE_ECDH: self.ecdh_th_ms}

    def with_overrides(self, **overrides) -> "CostModel":
        return replace(self, **overrides)


@dataclass
class ScenarioResult:
    name: str
    mode: ScenarioMode
    latency_ms: int
    th_ms: int
    entries: int
    ok: bool = True
    details: dict = field(default_factory=dict)


def _session_key(shared: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=b"token-session").derive(shared)


def _kcv(key: bytes) -> bytes:
    return hashlib.sha256(key).digest()[:4]


def pkcs11_token_program(mode: ScenarioMode | str, costs: CostModel, rng: crypto.Drbg) -> EnclaveProgram:
    """Build the token program. Requests are ``(command, args)`` tuples."""
    mode = ScenarioMode(mode)

    def keys(ctx: EnclaveContext) -> dict:
        return ctx.vars.setdefault("keys", {})

    def sessions(ctx: EnclaveContext) -> dict:
        return ctx.vars.setdefault("sessions", {})

    def generate(party):
        if mode is ScenarioMode.ENCLAVE_ALONE:
            def effect(ctx):
                keys(ctx)[party] = crypto.ecdh_keygen(rng)
            return [Compute(costs.ec_keygen_enclave_ms, effect), Return(lambda ctx: keys(ctx)[party].public)]

        def store(ctx):
            resp = ctx.last_response.raise_for_status()
            (handle,) = struct.unpack_from("<I", resp.payload)
            keys(ctx)[party] = (handle, resp.payload[4:])
            return resp.payload[4:]
        return [ThRequest(MsgKind.KEY_GEN, bytes([KeyKind.ECDH, 1])), PollTh(), Return(store)]

    def derive(party, peer_pub):
        if mode is ScenarioMode.ENCLAVE_ALONE:
            def effect(ctx):
                sessions(ctx)[party] = _session_key(crypto.ecdh_agree(keys(ctx)[party].private, peer_pub))
            return [Compute(costs.ecdh_enclave_ms, effect), Return(lambda ctx: _kcv(sessions(ctx)[party]))]

        def finish(ctx):
            shared = ctx.last_response.raise_for_status().payload
            sessions(ctx)[party] = _session_key(shared)
            return _kcv(sessions(ctx)[party])
        return [
            ThRequest(MsgKind.KEY_USE_ECDH, lambda ctx: struct.pack("<I", keys(ctx)[party][0]) + peer_pub),
            PollTh(),
            Return(finish),
        ]

    def encrypt(party, plaintext):
        def run(ctx):
            nonce = rng.generate(12)
            return nonce + AESGCM(sessions(ctx)[party]).encrypt(nonce, plaintext, None)
        return [Return(run)]

    def decrypt(party, blob):
        return [Return(lambda ctx: AESGCM(sessions(ctx)[party]).decrypt(blob[:12], blob[12:], None))]

    def handler(request, ctx):
        command, args = request
        if command == "generate":
            return generate(args["party"])
        if command == "derive":
            return derive(args["party"], args["peer_pub"])
        if command == "encrypt":
            return encrypt(args["party"], args["plaintext"])
        if command == "decrypt":
            return decrypt(args["party"], args["ciphertext"])
        raise ValueError(f"unknown token command {command!r}")

    return EnclaveProgram(handler, name=f"pkcs11-token/{mode.value}")


def _prepare(system, costs: CostModel) -> None:
    system.machine.clock.slice_ms = costs.slice_ms
    system.th.costs.update(costs.th_costs())


def run_scenario_ec_keygen(system, mode: ScenarioMode | str, costs: CostModel | None = None,
                           image: bytes = TOKEN_IMAGE) -> ScenarioResult:
    mode, costs = ScenarioMode(mode), costs or CostModel()
    _prepare(system, costs)
    client = ReeClient(system.sm, pid=100)
    handle = client.open_session(image, pkcs11_token_program(mode, costs, system.enclave_rng(b"keygen")),
                                 "pkcs11-keygen")
    th_before = system.th.busy_ms
    out = client.invoke(handle, ("generate", {"party": "A"}))
    th_ms = system.th.busy_ms - th_before
    client.close_session(handle)
    return ScenarioResult("ec_keygen", mode, out.latency_ms, th_ms, out.entries,
                          ok=len(out.result) == crypto.PUBLIC_KEY_SIZE)


def run_scenario_ecdh(system, mode: ScenarioMode | str, costs: CostModel | None = None,
                      image: bytes = TOKEN_IMAGE, message: bytes = b"attack at dawn") -> ScenarioResult:
    """Two parties each hold an EC key, derive a session key and exchange one message."""
    mode, costs = ScenarioMode(mode), costs or CostModel()
    _prepare(system, costs)
    client = ReeClient(system.sm, pid=200)
    handle = client.open_session(image, pkcs11_token_program(mode, costs, system.enclave_rng(b"ecdh")),
                                 "pkcs11-ecdh")
    pub_a = client.invoke(handle, ("generate", {"party": "A"})).result
    pub_b = client.invoke(handle, ("generate", {"party": "B"})).result
    th_before = system.th.busy_ms
    timed = client.invoke(handle, ("derive", {"party": "A", "peer_pub": pub_b}))
    th_ms = system.th.busy_ms - th_before
    kcv_b = client.invoke(handle, ("derive", {"party": "B", "peer_pub": pub_a})).result
    ciphertext = client.invoke(handle, ("encrypt", {"party": "A", "plaintext": message})).result
    plaintext = client.invoke(handle, ("decrypt", {"party": "B", "ciphertext": ciphertext})).result
    client.close_session(handle)
    ok = timed.result == kcv_b and plaintext == message
    return ScenarioResult("ecdh", mode, timed.latency_ms, th_ms, timed.entries, ok,
                          {"pub_a": pub_a, "pub_b": pub_b, "ciphertext": ciphertext})


def quantized_latency(th_cost: int, slice_ms: int) -> int:
    """Closed form for polling-mode latency: a response is only seen on the next entry."""
    return -(-max(th_cost, 1) // slice_ms) * slice_ms
