import random

from bhsim.bst import NOT_TAKEN, TAKEN, BstTable
from bhsim.config import builtin_profile
from bhsim.trace import BranchKind

A72 = builtin_profile("cortex-a72")


def table():
    return BstTable(A72)


# --- index / tag ---

def test_index_is_bits_15_4():
    t = table()
    assert t.index_of(0x0000_0000_0001_2340) == 0x234
    assert t.index_of(0x0) == 0


def test_addresses_sharing_bits_15_4_share_the_slot():
    t = table()
    a, b = 0x0041_2340, 0x7F41_2340
    assert t.index_of(a) == t.index_of(b)
    assert t.tag_of(a) != t.tag_of(b)


def test_tag_discipline_prevents_foreign_reads():
    t = table()
    a, b = 0x0041_2340, 0x7F41_2340
    t.classify_and_update(a, TAKEN)
    assert t.lookup(b) is None  # same slot, different tag: not retrievable


# --- Alg. 1 cases ---

def test_miss_classifies_biased_and_inserts():
    t = table()
    assert t.classify_and_update(0x1000, TAKEN).biased
    assert t.lookup(0x1000).biased


def test_differing_outcome_clears_bias_stickily():
    t = table()
    t.classify_and_update(0x1000, TAKEN)
    assert not t.classify_and_update(0x1000, NOT_TAKEN).biased
    # non-biased is sticky regardless of later outcomes
    assert not t.classify_and_update(0x1000, NOT_TAKEN).biased
    assert not t.classify_and_update(0x1000, TAKEN).biased


def test_repeated_outcome_stays_biased():
    t = table()
    t.classify_and_update(0x1000, TAKEN)
    assert t.classify_and_update(0x1000, TAKEN).biased


class OracleBst:
    """Independent transcription of the bias-determination algorithm as a
    plain per-address map (no slots, no tags)."""

    def __init__(self):
        self.recs: dict[int, tuple[object, bool]] = {}

    def classify(self, addr, outcome) -> bool:
        rec = self.recs.get(addr)
        if rec is None:
            biased = True
        elif rec[1]:
            biased = rec[0] == outcome
        else:
            biased = False
        self.recs[addr] = (outcome, biased)
        return biased


def test_alg1_truth_table_exhaustive():
    # all 8 (record state x outcome) combinations against the oracle
    states = [None, (TAKEN, True), (NOT_TAKEN, True), (TAKEN, False)]
    for state in states:
        for outcome in (TAKEN, NOT_TAKEN):
            t = table()
            oracle = OracleBst()
            if state is not None:
                prev, biased = state
                oracle.classify(0x1000, prev)
                t.classify_and_update(0x1000, prev)
                if not biased:  # reach non-biased via a differing outcome
                    other = NOT_TAKEN if prev == TAKEN else TAKEN
                    oracle.classify(0x1000, other)
                    t.classify_and_update(0x1000, other)
            assert (t.classify_and_update(0x1000, outcome).biased
                    == oracle.classify(0x1000, outcome))


def test_alg1_matches_oracle_over_random_sequences():
    # non-aliasing addresses (distinct index bits), random outcome kinds
    rng = random.Random(0xB57)
    addrs = [0x0040_0000 + i * 0x10 for i in range(256)]
    outcomes = [TAKEN, NOT_TAKEN, 0x111000, 0x222000, 0x333000]
    t = table()
    oracle = OracleBst()
    for _ in range(10_000):
        addr = rng.choice(addrs)
        outcome = rng.choice(outcomes)
        assert (t.classify_and_update(addr, outcome).biased
                == oracle.classify(addr, outcome))


# --- eviction triggers (kind rules) ---

def setup_victim(t):
    victim = 0x0041_2340
    t.prime_nonbiased(victim, 0x111000, 0x222000)
    assert not t.lookup(victim).biased
    return victim


def test_taken_conditional_evicts_aliasing_victim():
    t = table()
    victim = setup_victim(t)
    assert t.maybe_evict(victim + 0x0100_0000, BranchKind.CONDITIONAL,
                         taken=True) is not None
    assert t.lookup(victim) is None


def test_indirect_always_evicts():
    t = table()
    victim = setup_victim(t)
    assert t.maybe_evict(victim + 0x0100_0000, BranchKind.INDIRECT,
                         taken=True) is not None


def test_not_taken_conditional_does_not_evict():
    t = table()
    victim = setup_victim(t)
    assert t.maybe_evict(victim + 0x0100_0000, BranchKind.CONDITIONAL,
                         taken=False) is None
    assert t.lookup(victim) is not None


def test_return_unconditional_svc_do_not_evict():
    t = table()
    victim = setup_victim(t)
    for kind in (BranchKind.RETURN, BranchKind.DIRECT, BranchKind.CALL,
                 BranchKind.SVC):
        assert t.maybe_evict(victim + 0x0100_0000, kind, taken=True) is None
    assert t.lookup(victim) is not None


def test_same_tag_occupancy_is_update_not_eviction():
    t = table()
    victim = setup_victim(t)
    assert t.maybe_evict(victim, BranchKind.INDIRECT, taken=True) is None
    assert t.lookup(victim) is not None


def test_post_eviction_amnesia():
    # after eviction the victim classifies as biased regardless of history
    t = table()
    victim = setup_victim(t)
    t.observe(BranchKind.CONDITIONAL, victim + 0x0100_0000, TAKEN, taken=True)
    assert t.classify_and_update(victim, 0x111000).biased


def test_fresh_table_classifies_first_seen_branches_biased():
    t = table()
    rng = random.Random(3)
    for _ in range(64):
        addr = rng.randrange(0, 1 << 30) & ~0xF
        if t.lookup(addr) is None:
            assert t.classify_and_update(addr, TAKEN).biased


# --- priming ---

def test_prime_with_direction_outcomes():
    t = table()
    t.prime_nonbiased(0x1000, TAKEN, NOT_TAKEN)
    assert not t.lookup(0x1000).biased


def test_prime_with_two_targets():
    t = table()
    t.prime_nonbiased(0x1000, 0xAAA000, 0xBBB000)
    assert not t.lookup(0x1000).biased


def test_prime_with_equal_outcomes_stays_biased():
    t = table()
    t.prime_nonbiased(0x1000, TAKEN, TAKEN)
    assert t.lookup(0x1000).biased


def test_context_tagging_guards_retrieval_not_eviction():
    profile = A72.with_mitigations(context_tagging=True)
    t = BstTable(profile)
    t.classify_and_update(0x0041_2340, TAKEN, ctx=1)
    assert t.lookup(0x0041_2340, ctx=2) is None  # other context cannot read
    # but an aliasing branch from any context still evicts
    assert t.maybe_evict(0x7F41_2340, BranchKind.CONDITIONAL, taken=True,
                         ctx=2) is not None
