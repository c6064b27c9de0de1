import random

import pytest

from trusthart.errors import (
    BadState, DataTooLarge, EnclaveDestroyed, NoRequest, NoSuchEnclave, PoolExhausted, ResourceExhausted,
)
from trusthart.machine import MachineConfig, Perm
from trusthart.monitor import REE, TH, EnclaveState, PmpMode, SbiCall
from trusthart.th.messages import MsgKind
from trusthart.th.report import MAX_USER_DATA
from trusthart.workloads.program import Compute, EnclaveProgram, OCall, PollTh, Return, ThRequest

from conftest import boot
from oracles import pmp_byte_oracle


def domain_entries(system, domain):
    """What an ideal, unbounded PMP would grant ``domain``: (base, length, perms) triples."""
    out = []
    if domain == REE:
        ree = system.machine.layout.ree
        out.append((ree.base, ree.length, Perm.RWX))
    for d in system.sm.live_enclaves():
        for z in d.zones:
            if z.owner == domain:
                out.append((z.base, z.length, z.perms))
    return out


@pytest.mark.parametrize("cap,expected", [(8, 1), (16, 3), (64, 15)])
def test_strict_capacity_formula(cap, expected):
    s = boot(machine={"pmp_capacity": cap, "epm_size": 2 * 1024 * 1024, "memory_size": 8 * 1024 * 1024},
             pmp_mode="strict", enclave_size=64 * 1024)
    assert s.sm.strict_capacity() == (cap - 2) // 4 == expected
    made = []
    with pytest.raises(ResourceExhausted):
        for i in range(expected + 1):
            made.append(s.sm.enclave_create(b"e%d" % i))
    assert len(made) == expected


def test_cache_mode_exceeds_strict_capacity():
    s = boot(pmp_mode="cache")
    descs = [s.sm.enclave_create(b"e%d" % i) for i in range(6)]
    assert len(s.sm.live_enclaves()) == 6
    with pytest.raises(PoolExhausted):
        for i in range(20):
            s.sm.enclave_create(b"more%d" % i)
    for d in descs:
        assert s.sm.access_as(d.domain, d.memory.base, 8, Perm.W)


def test_lifecycle_and_destroy_zeroizes(system):
    sm, mem = system.sm, system.machine.memory
    d = sm.enclave_create(b"code!", "ext")
    assert mem.read(d.memory.base, 5) == b"code!"
    assert d.identity.external_id == "ext"
    mem.write(d.channel.base, b"leftover")
    sm.enclave_destroy(d.eid)
    assert mem.read(d.memory.base, d.memory.length) == bytes(d.memory.length)
    assert mem.read(d.channel.base, 8) == bytes(8)
    assert d.state is EnclaveState.DESTROYED
    assert all(h.pmp.granted == 0 for h in system.machine.normal_harts)
    with pytest.raises(EnclaveDestroyed):
        sm.enclave_destroy(d.eid)
    with pytest.raises(NoSuchEnclave):
        sm.enclave_destroy(999)
    assert d.eid not in system.th.channels


def test_image_too_large(system):
    with pytest.raises(ValueError):
        system.sm.enclave_create(b"x" * (system.sm.enclave_size + 1))


def test_two_enclave_isolation():
    s = boot(pmp_mode="cache")
    a, b = s.sm.enclave_create(b"a"), s.sm.enclave_create(b"b")
    assert s.sm.access_as(a.domain, a.memory.base, 4, Perm.X)
    assert not s.sm.access_as(a.domain, b.memory.base, 4, Perm.R)
    assert not s.sm.access_as(b.domain, a.channel.base, 4, Perm.R)
    assert not s.sm.access_as(REE, a.memory.base, 4, Perm.R)
    assert s.sm.access_as(TH, a.channel.base, 4, Perm.W)
    assert not s.sm.access_as(TH, a.memory.base, 4, Perm.R)
    assert not s.sm.access_as(a.domain, s.machine.layout.ree.base, 4, Perm.R)
    assert not s.sm.access_as(a.domain, a.channel.base, 4, Perm.X)


def test_cache_mode_refills_and_evicts():
    s = boot(pmp_mode="cache")
    descs = [s.sm.enclave_create(b"e%d" % i) for i in range(5)]
    hart = s.machine.normal_harts[0]
    for d in descs:
        assert s.sm.access_as(d.domain, d.memory.base, 1, Perm.R, hart_id=hart.id)
        assert s.sm.access_as(d.domain, d.channel.base, 1, Perm.R, hart_id=hart.id)
    assert s.sm.faults == 10
    assert hart.pmp.granted <= s.machine.config.pmp_capacity - s.machine.config.pmp_reserved
    assert any(e.kind == "pmp-evict" for e in s.machine.trace)


@pytest.mark.parametrize("seed", [1, 2])
def test_cache_mode_matches_unbounded_oracle(seed):
    rnd = random.Random(seed)
    s = boot(pmp_mode="cache")
    descs = [s.sm.enclave_create(b"enclave-%d" % i) for i in range(6)]
    domains = [REE] + [d.domain for d in descs]
    lay = s.machine.layout
    targets = [(lay.ree.base, lay.ree.length), (lay.sm.base, lay.sm.length), (lay.th.base, lay.th.length)]
    targets += [(z.base, z.length) for d in descs for z in d.zones]
    harts = [h.id for h in s.machine.normal_harts]
    divergences = 0
    for _ in range(10_000):
        domain = rnd.choice(domains)
        base, length = rnd.choice(targets)
        n = rnd.randint(1, 16)
        addr = base + rnd.randint(-8, length - 1)
        access = rnd.choice([Perm.R, Perm.W, Perm.X])
        got = bool(s.sm.access_as(domain, addr, n, access, hart_id=rnd.choice(harts)))
        want = pmp_byte_oracle(domain_entries(s, domain), addr, n, access)
        divergences += got != want
    assert divergences == 0
    assert s.sm.faults > 0


def test_strict_mode_never_refills(system):
    d = system.sm.enclave_create(b"x")
    assert system.sm.access_as(d.domain, d.memory.base, 1, Perm.R)
    assert system.sm.faults == 0


def test_sbi_dispatch(system):
    sm = system.sm
    prog = EnclaveProgram([Compute(5), Return(7)])
    d = sm.sbi(SbiCall.CREATE, b"img", "x", 0, prog)
    ev = sm.sbi(SbiCall.ENTER, d.eid, None)
    assert ev.result == 7 and ev.time == 5
    assert len(sm.sbi(SbiCall.ATTEST, d.eid, b"n")) == 450 + 1
    sm.sbi(SbiCall.IPI_SEND, 2, 1)
    sm.sbi(SbiCall.DESTROY, d.eid)
    with pytest.raises(ValueError):
        sm.sbi(99)


def test_preemption_and_ocall(system):
    sm = system.sm
    prog = EnclaveProgram([Compute(250), OCall("read", b"q"), Return(lambda ctx: ctx.ocall_results[-1])])
    d = sm.enclave_create(b"long", program=prog)
    ev = sm.enclave_enter(d.eid)
    assert ev.kind.value == "preempted" and ev.time == 100
    with pytest.raises(BadState):
        sm.enclave_enter(d.eid)
    ev = sm.enclave_resume(d.eid)
    ev = sm.enclave_resume(d.eid)
    assert ev.kind.value == "ocall" and ev.ocall == "read" and ev.time == 250
    ev = sm.enclave_resume(d.eid, b"answer")
    assert ev.result == b"answer"
    assert system.machine.normal_harts[0].domain == REE


def test_poll_after_slice_is_done():
    s = boot(th_costs={MsgKind.KEY_GEN: 40})
    prog = EnclaveProgram([ThRequest(MsgKind.KEY_GEN, bytes([1, 1])), PollTh(), Return(lambda c: c.last_response)])
    d = s.sm.enclave_create(b"poller", program=prog)
    with pytest.raises(NoRequest):
        s.sm.poll_th(d.eid)
    ev = s.sm.enclave_enter(d.eid)
    assert ev.time == 100
    inv = d.invocation
    assert inv.awaiting_seq is not None
    assert s.sm.poll_th(d.eid)[0] == "done"


def test_poll_before_completion_is_pending():
    s = boot(th_costs={MsgKind.KEY_GEN: 150})
    prog = EnclaveProgram([ThRequest(MsgKind.KEY_GEN, bytes([1, 1])), PollTh()])
    d = s.sm.enclave_create(b"poller", program=prog)
    s.sm.enclave_enter(d.eid)
    assert s.machine.clock.now == 100
    assert s.sm.poll_th(d.eid) == ("pending", None)
    s.machine.clock.advance_to(150)
    status, response = s.sm.poll_th(d.eid)
    assert status == "done" and response.ready_at == 150


def test_attestation_data_limit(system):
    d = system.sm.enclave_create(b"att")
    assert len(system.sm.attest(d.eid, b"x" * MAX_USER_DATA)) == 450 + MAX_USER_DATA
    with pytest.raises(DataTooLarge):
        system.sm.attest(d.eid, b"x" * (MAX_USER_DATA + 1))


def test_destroy_with_inflight_request_drops_it():
    s = boot(th_costs={MsgKind.KEY_GEN: 400})
    prog = EnclaveProgram([ThRequest(MsgKind.KEY_GEN, bytes([1, 1])), PollTh()])
    d = s.sm.enclave_create(b"dying", program=prog)
    s.sm.enclave_enter(d.eid)
    assert s.th.ready_time(d.eid) is not None
    s.sm.enclave_destroy(d.eid)
    assert s.th.ready_time(d.eid) is None
    assert s.th.run_until(10_000) == []


def test_external_id_does_not_change_identity(system):
    a = system.sm.enclave_create(b"same", "one")
    system.sm.enclave_destroy(a.eid)
    b = system.sm.enclave_create(b"same", "two")
    assert a.code_hash == b.code_hash and a.identity != b.identity


def test_unbounded_strict_equals_oracle():
    s = boot(config=MachineConfig(pmp_capacity=64), pmp_mode=PmpMode.STRICT)
    descs = [s.sm.enclave_create(b"u%d" % i) for i in range(5)]
    for d in descs:
        for other in descs:
            for z in other.zones:
                want = pmp_byte_oracle(domain_entries(s, d.domain), z.base, 4, Perm.R)
                assert bool(s.sm.access_as(d.domain, z.base, 4, Perm.R)) == want
