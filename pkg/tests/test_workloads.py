import pytest
from hypothesis import given, settings, strategies as st

from trusthart.errors import AccessDenied
from trusthart.th.messages import MsgKind
from trusthart.workloads.program import Compute, EnclaveProgram, PollTh, Return, ThRequest
from trusthart.workloads.ree import ReeClient
from trusthart.workloads.scenarios import (
    CostModel, ScenarioMode, quantized_latency, run_scenario_ec_keygen, run_scenario_ecdh,
)

from conftest import boot
from oracles import polling_latency_trace, quantization_formula

ALONE, WITH_TH = ScenarioMode.ENCLAVE_ALONE, ScenarioMode.ENCLAVE_AND_TH


def _th_roundtrip(system, cost, slice_ms):
    system.th.costs[MsgKind.KEY_GEN] = cost
    system.machine.clock.slice_ms = slice_ms
    prog = EnclaveProgram([ThRequest(MsgKind.KEY_GEN, bytes([1, 1])), PollTh(),
                           Return(lambda ctx: ctx.last_response.raise_for_status().payload)])
    client = ReeClient(system.sm, pid=1)
    handle = client.open_session(b"roundtrip", prog)
    out = client.invoke(handle, None)
    client.close_session(handle)
    return out


def test_table_rows_enclave_alone(system):
    assert run_scenario_ec_keygen(system, ALONE).latency_ms == 12
    assert run_scenario_ecdh(system, ALONE).latency_ms == 48


def test_table_rows_enclave_and_th(system):
    keygen = run_scenario_ec_keygen(system, WITH_TH)
    ecdh = run_scenario_ecdh(system, WITH_TH)
    assert (keygen.latency_ms, ecdh.latency_ms) == (100, 100)
    assert (keygen.th_ms, ecdh.th_ms) == (12, 23)
    assert keygen.entries == 2


def test_hypothetical_slow_th_rounds_to_two_slices(system):
    costs = CostModel(ec_keygen_th_ms=150)
    assert run_scenario_ec_keygen(system, WITH_TH, costs).latency_ms == 200


def test_two_party_ecdh_roundtrip(system):
    for mode in ScenarioMode:
        r = run_scenario_ecdh(system, mode)
        assert r.ok
        assert r.details["pub_a"] != r.details["pub_b"]
        assert b"attack at dawn" not in r.details["ciphertext"]


@settings(max_examples=150, deadline=None)
@given(st.integers(0, 600), st.integers(1, 250))
def test_quantization_law_matches_trace(cost, slice_ms):
    s = _shared()
    out = _th_roundtrip(s, cost, slice_ms)
    expected = polling_latency_trace(cost, slice_ms)
    assert out.latency_ms == expected == quantization_formula(cost, slice_ms) == quantized_latency(cost, slice_ms)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 600), st.integers(1, 250))
def test_ipi_mode_latency_matches_trace(cost, slice_ms):
    s = _shared(th_ipi=True)
    out = _th_roundtrip(s, cost, slice_ms)
    assert out.latency_ms == polling_latency_trace(cost, slice_ms, ipi=True) == cost


def test_ipi_mode_table_row():
    s = boot(machine={"th_ipi": True})
    assert run_scenario_ec_keygen(s, WITH_TH).latency_ms == 12
    assert run_scenario_ecdh(s, WITH_TH).latency_ms == 23


def test_cost_model_validation():
    with pytest.raises(ValueError):
        CostModel(ecdh_th_ms=-1)
    with pytest.raises(ValueError):
        CostModel(slice_ms=0)
    assert CostModel().with_overrides(ecdh_th_ms=5).ecdh_th_ms == 5


def test_session_handles_and_sharing(system):
    a, b = ReeClient(system.sm, pid=1), ReeClient(system.sm, pid=2)
    handle = a.open_session(b"svc", EnclaveProgram([Compute(3), Return("ok")]))
    with pytest.raises(AccessDenied):
        b.invoke(handle, None)
    a.share_handle(handle, b)
    assert b.invoke(handle, None).result == "ok"  # the modelled least-privilege gap


def test_long_compute_spans_slices(system):
    client = ReeClient(system.sm, pid=1)
    handle = client.open_session(b"slow", EnclaveProgram([Compute(250), Return(1)]))
    out = client.invoke(handle, None)
    assert out.latency_ms == 250 and out.entries == 3


def test_ocall_handlers(system):
    from trusthart.workloads.program import OCall
    client = ReeClient(system.sm, pid=1, ocall_handlers={"time": lambda payload: b"t=" + payload})
    prog = EnclaveProgram([OCall("time", b"now"), Return(lambda ctx: ctx.ocall_results[-1])])
    handle = client.open_session(b"oc", prog)
    assert client.invoke(handle, None).result == b"t=now"


def test_sensitive_key_handle_flows_not_material(system):
    run_scenario_ecdh(system, WITH_TH)
    secrets = system.th.sensitive_materials()
    assert len(secrets) >= 3
    assert not any(s in blob for s in secrets for blob in system.th.traffic)


_SYSTEMS = {}


def _shared(th_ipi=False):
    if th_ipi not in _SYSTEMS:
        _SYSTEMS[th_ipi] = boot(machine={"th_ipi": th_ipi})
    return _SYSTEMS[th_ipi]
