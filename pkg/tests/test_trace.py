import pytest

from bhsim.engine import inject_noise
from bhsim.trace import (Branch, BranchKind, TraceBuilder, TraceError,
                         dump_trace, parse_trace)


def sample_program():
    b = TraceBuilder(base=0x40_0000)
    b.label("entry")
    b.straight(3)
    b.bcond(cond=0x70_0000, taken="skip", taken_if_nonzero=False)
    b.load(0x78_0000)
    b.label("skip")
    b.br(0x70_0040, at=0x41_5000)
    b.label("t1")
    b.b("end", at=0x42_0000)
    b.label("t2")
    b.ret("end", at=0x42_1000)
    b.svc()
    b.flush(0x70_0000)
    b.barrier()
    b.probe(0x78_0000)
    b.ctx(2, "process")
    b.setreg("params", 0xA0_0000)
    b.loadreg("params")
    b.label("end")
    b.halt()
    return b.build(entry="entry")


def test_builder_assigns_addresses_and_successors():
    prog = sample_program()
    order = list(prog.in_order())
    assert prog.entry == order[0].pc
    for a, c in zip(order, order[1:]):
        assert prog.succ[a.pc] == c.pc


def test_builder_rejects_duplicate_addresses():
    b = TraceBuilder()
    b.straight(1, at=0x1000)
    with pytest.raises(TraceError, match="duplicate"):
        b.straight(1, at=0x1000)


def test_builder_rejects_undefined_labels():
    b = TraceBuilder()
    b.b("nowhere")
    b.halt()
    with pytest.raises(TraceError, match="nowhere"):
        b.build()


def test_succ_fixup_points_at_next_step():
    b = TraceBuilder()
    pc = b.bcond(const_taken=True, taken="__succ__")
    nxt = b.halt()
    prog = b.build()
    assert prog.steps[pc].taken_target == nxt


def test_dump_parse_round_trip():
    prog = sample_program()
    text = dump_trace(prog)
    again = parse_trace(text)
    assert dump_trace(again) == text
    assert again.entry == prog.entry
    assert list(again.steps) == list(prog.steps)


def test_dump_uses_documented_opcodes():
    text = dump_trace(sample_program())
    for op in ("BCOND", "BR", "B ", "RET", "SVC", "LOAD", "FLUSH", "BARRIER",
               "PROBE", "CTX", "STRAIGHT", "SETREG", "LOADREG", "HALT"):
        assert op in text, op


def test_branch_operands_derived():
    cond = Branch(0x1000, BranchKind.CONDITIONAL, cond_addr=0x2000,
                  taken_target=0x1010)
    assert cond.operands == (0x2000,)
    const = Branch(0x1000, BranchKind.CONDITIONAL, const_taken=True,
                   taken_target=0x1010)
    assert const.operands == ()
    ind = Branch(0x1000, BranchKind.INDIRECT, ptr_addr=0x3000)
    assert ind.operands == (0x3000,)


# --- noise injection ---

def test_inject_noise_p_zero_is_identity():
    prog = sample_program()
    assert inject_noise(prog, 0.0, seed=1) is prog


def test_inject_noise_p_one_always_inserts():
    prog = sample_program()
    for seed in range(20):
        noisy = inject_noise(prog, 1.0, seed=seed, alias_pc=0x7F00_0000)
        assert 0x7F00_0000 in noisy.steps
        step = noisy.steps[0x7F00_0000]
        assert step.kind is BranchKind.CONDITIONAL and step.const_taken
        # control flow is unchanged: the branch targets the displaced step
        assert noisy.succ[0x7F00_0000] == step.taken_target


def test_inject_noise_counts_match_binomial_bound():
    # p=0.1 over 10,000 seeded draws: count within 3 sigma of 1,000
    prog = sample_program()
    n, p = 10_000, 0.1
    count = sum(
        1 for seed in range(n)
        if inject_noise(prog, p, seed=seed, alias_pc=0x7F00_0000) is not prog)
    sigma = (n * p * (1 - p)) ** 0.5
    assert abs(count - n * p) <= 3 * sigma


def test_inject_noise_deterministic_under_seed():
    prog = sample_program()
    a = inject_noise(prog, 0.7, seed=99, alias_pc=0x7F00_0000)
    b = inject_noise(prog, 0.7, seed=99, alias_pc=0x7F00_0000)
    assert dump_trace(a) == dump_trace(b)


def test_inject_noise_rejects_bad_probability():
    with pytest.raises(ValueError):
        inject_noise(sample_program(), 1.5, seed=0)
