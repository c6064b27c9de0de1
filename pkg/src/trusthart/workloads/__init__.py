"""REE host model, enclave program model and timing scenarios."""

from .program import (
    Attest, Compute, EnclaveContext, EnclaveProgram, OCall, PollTh, Return, ThRequest,
)

_LAZY = {
    "ReeClient": ".ree", "InvokeResult": ".ree",
    "CostModel": ".scenarios", "ScenarioMode": ".scenarios", "ScenarioResult": ".scenarios",
    "pkcs11_token_program": ".scenarios", "run_scenario_ec_keygen": ".scenarios",
    "run_scenario_ecdh": ".scenarios", "quantized_latency": ".scenarios", "TOKEN_IMAGE": ".scenarios",
}


def __getattr__(name):
    # ree/scenarios import the monitor, which imports .program; load them on demand
    if name in _LAZY:
        import importlib
        return getattr(importlib.import_module(_LAZY[name], __name__), name)
    raise AttributeError(name)


__all__ = ["Attest", "Compute", "EnclaveContext", "EnclaveProgram", "OCall", "PollTh", "Return", "ThRequest",
           *_LAZY]
