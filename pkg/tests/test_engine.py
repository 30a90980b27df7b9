"""Engine behavior: speculation windows, rollback, budgets, determinism.

The reference shape for most tests is the if-load snippet: a conditional
guarded by a flushable flag cell, with a data-cache load on its taken path.
"""

import pytest

from bhsim.config import builtin_profile
from bhsim.engine import Engine, run_trace
from bhsim.trace import TraceBuilder, TraceError

A76 = builtin_profile("cortex-a76")
A72 = builtin_profile("cortex-a72")

FLAG = 0x71_0000
DC = 0xC0_0000
PTR = 0x70_1000
T_LEAK = 0x42_0000
T_SAFE = 0x42_1000


def if_load_program(barrier: bool = False, prefix: int = 0):
    """Spectre-v1 shape: branch taken -> speculative load of the dc line."""
    b = TraceBuilder()
    b.bcond(cond=FLAG, taken="leak", at=0x41_0000)
    b.straight(1)
    b.b("end")
    b.label("leak")
    if barrier:
        pass  # barrier goes before the branch, see below
    if prefix:
        b.straight(prefix)
    b.load(DC)
    b.label("end")
    b.halt()
    return b.build()


def barrier_first_program():
    b = TraceBuilder()
    b.flush(FLAG)
    b.barrier()
    b.bcond(cond=FLAG, taken="leak", at=0x41_0000)
    b.straight(1)
    b.b("end")
    b.label("leak")
    b.load(DC)
    b.label("end")
    b.halt()
    return b.build()


def train(eng, prog, flag_value, runs=4):
    for _ in range(runs):
        eng.run(prog, mem={FLAG: flag_value})


def test_trained_taken_with_flushed_flag_leaks():
    eng = Engine(A76)
    prog = if_load_program()
    train(eng, prog, 1)
    eng.cache.flush(DC)
    eng.cache.flush(FLAG)
    report = eng.run(prog, mem={FLAG: 0})
    assert DC in report.speculative_loads
    assert DC not in report.committed_loads
    ev = report.events_at(0x41_0000)[-1]
    assert ev.predicted is True and ev.actual is False and ev.mispredict


def test_barrier_before_branch_prevents_speculation():
    eng = Engine(A76)
    plain = if_load_program()
    train(eng, plain, 1)
    eng.cache.flush(DC)
    report = eng.run(barrier_first_program(), mem={FLAG: 0})
    assert DC not in report.speculative_loads
    assert not eng.cache.present(DC)


@pytest.mark.parametrize("prefix,leaks", [(100, True), (200, False)])
def test_window_budget_gates_the_leak(prefix, leaks):
    # budget 128: a 100-instruction prefix still fits, 200 does not
    eng = Engine(A76)
    assert A76.speculation_window_budget == 128
    prog = if_load_program(prefix=prefix)
    train(eng, prog, 1)
    eng.cache.flush(DC)
    eng.cache.flush(FLAG)
    report = eng.run(prog, mem={FLAG: 0})
    assert (DC in report.speculative_loads) == leaks


def test_speculation_disabled_never_issues_wrong_path_loads():
    eng = Engine(A76, speculation=False)
    prog = if_load_program()
    train(eng, prog, 1)
    eng.cache.flush(DC)
    eng.cache.flush(FLAG)
    report = eng.run(prog, mem={FLAG: 0})
    assert report.speculative_loads == []


def test_arch_digest_independent_of_speculation():
    def full_run(speculation):
        eng = Engine(A76, speculation=speculation)
        prog = if_load_program()
        train(eng, prog, 1)
        eng.cache.flush(DC)
        eng.cache.flush(FLAG)
        r = eng.run(prog, mem={FLAG: 0})
        eng.cache.flush(FLAG)
        r2 = eng.run(prog, mem={FLAG: 1})
        return r2.arch_digest

    assert full_run(True) == full_run(False)


def test_rollback_restores_history_to_replay_value():
    def run(speculation):
        eng = Engine(A76, speculation=speculation)
        prog = if_load_program()
        train(eng, prog, 1)
        eng.cache.flush(FLAG)
        eng.run(prog, mem={FLAG: 0})  # mispredicted window, rolled back
        return eng.history.read()

    assert run(True) == run(False)


def test_retained_cache_fills_survive_rollback():
    eng = Engine(A76)
    prog = if_load_program()
    train(eng, prog, 1)
    eng.cache.flush(DC)
    eng.cache.flush(FLAG)
    eng.run(prog, mem={FLAG: 0})
    assert eng.cache.present(DC)  # the side channel


def test_probe_latency_semantics():
    b = TraceBuilder()
    b.probe(0x9000_0000)
    b.load(0x9000_1000)
    b.probe(0x9000_1000)
    b.flush(0x9000_1000)
    b.probe(0x9000_1000)
    b.halt()
    report = run_trace(b.build(), A76)
    assert report.probe_latency(0x9000_0000) == 200  # never touched
    # present after the load, then flushed: last probe misses
    assert report.probes[1][1] == 10
    assert report.probes[2][1] == 200
    with pytest.raises(KeyError):
        report.probe_latency(0xDEAD)


def test_cascaded_speculation_uses_speculative_history():
    # two branches inside one window: the second prediction must consume the
    # first branch's speculatively pushed outcome
    b = TraceBuilder()
    b.flush(FLAG)
    b.bcond(cond=FLAG, taken="__succ__", at=0x41_0000)
    b.bcond(const_taken=True, taken="__succ__", at=0x41_2000)
    b.halt()
    prog = b.build()
    eng = Engine(A76)
    # record the first branch as taken so its speculative push is nonzero
    eng.run(prog, mem={FLAG: 1})
    eng.cache.flush(FLAG)
    pre = eng.history.read()
    report = eng.run(prog, mem={FLAG: 1})
    inner = [e for e in report.events if e.pc == 0x41_2000 and e.speculative]
    assert inner, "second branch must be predicted inside the window"
    assert inner[0].history_bits != pre.bits  # saw the speculated footprint


def test_nested_window_depth_is_bounded():
    b = TraceBuilder()
    ptrs = [PTR + i * 0x40 for i in range(6)]
    b.label("start")
    for i, p in enumerate(ptrs):
        b.flush(p)
    for i, p in enumerate(ptrs):
        b.br(p, at=0x41_0000 + i * 0x100)
        b.label(f"t{i}")
    b.halt()
    prog = b.build()
    mem = {}
    order = list(prog.in_order())
    # every indirect branch targets the following step
    for i, p in enumerate(ptrs):
        br_pc = 0x41_0000 + i * 0x100
        mem[p] = prog.succ[br_pc]
    eng = Engine(A76)
    eng.run(prog, mem=mem)  # trains targets
    r = eng.run(prog)
    assert r.arch_digest  # simply must terminate with windows capped


def test_context_switch_fires_bpu_flush_on_process_switch_only():
    prof = A72.with_mitigations(bpu_flush_on_context_switch=True)
    eng = Engine(prof)
    prog = if_load_program()
    train(eng, prog, 1)
    assert sum(eng.predictor.occupancy()) > 0
    b = TraceBuilder()
    b.ctx(1, "syscall")
    b.halt()
    eng.run(b.build())
    assert sum(eng.predictor.occupancy()) > 0  # syscalls stay unprotected
    b = TraceBuilder()
    b.ctx(2, "process")
    b.halt()
    eng.run(b.build())
    assert sum(eng.predictor.occupancy()) == 0
    assert not eng.bst.slots


def test_context_switch_fires_bhb_clear_on_privilege_switch():
    prof = A76.with_mitigations(bhb_clear_on_privilege_switch=True)
    eng = Engine(prof)
    prog = if_load_program()
    train(eng, prog, 1)
    assert eng.history.read().bits != 0
    b = TraceBuilder()
    b.ctx(1, "syscall")
    b.halt()
    eng.run(b.build())
    assert eng.history.read().bits == 0


def test_architectural_fetch_off_trace_is_an_error():
    b = TraceBuilder()
    b.b(0x9999_0000, at=0x1000)  # no instruction at target
    b.straight(1, at=0x9999_0000)
    prog = b.build()
    prog.steps.pop(0x9999_0000)
    prog.succ.pop(0x1000, None)
    eng = Engine(A76)
    with pytest.raises(TraceError, match="no instruction"):
        eng.run(prog)


def test_indirect_without_prediction_stalls_instead_of_speculating():
    b = TraceBuilder()
    b.flush(PTR)
    b.br(PTR, at=0x41_5000)
    b.label("t")
    b.load(DC)
    b.halt()
    prog = b.build()
    eng = Engine(A76)
    report = eng.run(prog, mem={PTR: prog.labels["t"]})
    assert report.speculative_loads == []  # resolved without speculation
    assert report.committed_loads == [DC]
