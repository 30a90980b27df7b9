"""Branch Status Table: per-branch bias tracking for history filtering.

Each slot holds at most one record (tag, last outcome, bias flag).  The
index is a fixed bit-slice of the branch address; the tag is a different
fold of the address, so index-aliasing branches contend for the slot but
never read each other's record.  Inserting over a foreign-tag resident is
an eviction: the victim becomes unknown and classifies as biased on its
next execution, regardless of its prior behavior.

Bias classification on a committed outcome:

    record missing             -> biased = True
    record biased              -> biased = (record.outcome == outcome)
    record non-biased          -> biased = False  (sticky)

followed by a write-back of (tag, outcome, biased).  Outcomes are the
direction for conditionals ("taken"/"not-taken") and the target address for
indirect branches.

Which committed branches touch the table at all is kind-dependent: indirect
BR/BLR always write, conditionals only when taken, and unconditional
branches, returns, and supervisor calls never do.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .config import MicroarchProfile
from .trace import BranchKind

TAKEN = "taken"
NOT_TAKEN = "not-taken"

_TAG_BITS = 12


def direction_outcome(taken: bool) -> str:
    return TAKEN if taken else NOT_TAKEN


@dataclass(slots=True)
class BstEntry:
    tag: int
    outcome: object  # direction string or int target
    biased: bool


@dataclass(frozen=True, slots=True)
class BiasVerdict:
    biased: bool


class BstTable:
    __slots__ = ("profile", "slots", "_index_mask", "_ctx_tagged")

    def __init__(self, profile: MicroarchProfile) -> None:
        self.profile = profile
        self.slots: dict[int, BstEntry] = {}
        width = profile.bst_index_hi - profile.bst_index_lo + 1
        self._index_mask = (1 << width) - 1
        self._ctx_tagged = profile.mitigations.context_tagging

    def index_of(self, addr: int) -> int:
        return (addr >> self.profile.bst_index_lo) & self._index_mask

    def tag_of(self, addr: int, ctx: int = 0) -> int:
        # distinct from the index fold; context tagging only guards retrieval
        tag = (((addr >> 16) & 0xFFFF) ^ ((addr >> 4) & 0xFFF)) & ((1 << _TAG_BITS) - 1)
        if self._ctx_tagged:
            tag ^= ctx & ((1 << _TAG_BITS) - 1)
        return tag

    def lookup(self, addr: int, ctx: int = 0) -> Optional[BstEntry]:
        entry = self.slots.get(self.index_of(addr))
        if entry is not None and entry.tag == self.tag_of(addr, ctx):
            return entry
        return None

    def classify_and_update(self, addr: int, outcome: object,
                            ctx: int = 0) -> BiasVerdict:
        """Bias determination on a committed outcome, then write-back."""
        idx = self.index_of(addr)
        tag = self.tag_of(addr, ctx)
        rec = self.slots.get(idx)
        if rec is None or rec.tag != tag:
            biased = True
        elif rec.biased:
            biased = rec.outcome == outcome
        else:
            biased = False
        self.slots[idx] = BstEntry(tag, outcome, biased)
        return BiasVerdict(biased)

    def peek_biased(self, addr: int, outcome: object, ctx: int = 0) -> bool:
        """Classification without write-back (speculative history updates)."""
        rec = self.lookup(addr, ctx)
        if rec is None:
            return True
        if rec.biased:
            return rec.outcome == outcome
        return False

    @staticmethod
    def write_triggering(kind: BranchKind, taken: bool) -> bool:
        if kind is BranchKind.INDIRECT:
            return True
        if kind is BranchKind.CONDITIONAL:
            return taken
        return False  # direct, call, return, svc

    def maybe_evict(self, addr: int, kind: BranchKind, taken: bool,
                    ctx: int = 0) -> Optional[BstEntry]:
        """Remove an index-aliasing foreign record if this branch may write.

        Same-tag occupancy is an update, not an eviction.  Returns the
        evicted record, if any.
        """
        if not self.write_triggering(kind, taken):
            return None
        idx = self.index_of(addr)
        rec = self.slots.get(idx)
        if rec is not None and rec.tag != self.tag_of(addr, ctx):
            del self.slots[idx]
            return rec
        return None

    def observe(self, kind: BranchKind, addr: int, outcome: object,
                taken: bool, ctx: int = 0) -> Optional[BiasVerdict]:
        """Commit-time table interaction for one branch.

        Non-writing kinds leave the table untouched and get no verdict.
        """
        if not self.write_triggering(kind, taken):
            return None
        self.maybe_evict(addr, kind, taken, ctx)
        return self.classify_and_update(addr, outcome, ctx)

    def prime_nonbiased(self, addr: int, outcome_a: object, outcome_b: object,
                        ctx: int = 0) -> None:
        """Establish a non-biased record by two differing outcomes."""
        self.classify_and_update(addr, outcome_a, ctx)
        self.classify_and_update(addr, outcome_b, ctx)

    def clear(self) -> None:
        self.slots.clear()

    def dump(self) -> dict[int, dict]:
        return {idx: {"tag": e.tag, "outcome": e.outcome, "biased": e.biased}
                for idx, e in sorted(self.slots.items())}
