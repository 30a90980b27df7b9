"""Tagged multi-table branch predictor with congruence-pressure eviction.

One table per configured history length; table 0 is the PC-only base
predictor, the others are indexed and tagged by (PC, history prefix).
Prediction returns the tag hit with the longest history; a lone base-table
hit counts only on cores that fall back to PC-based prediction.

Update policy (commit time):

* the provider entry is stepped toward the outcome (saturating counter) or
  has its target overwritten;
* a misprediction allocates one entry in the next-longer table;
* a branch with no provider records its outcome in the base table and
  allocates in the first history table, so unseen (PC, history) pairs
  become predictable;
* everywhere the branch's (PC, history) maps onto a foreign-tag resident,
  the resident takes an alias touch: saturating counters are shared, so the
  alias steps the resident's counter (out-of-place mistraining), and the
  slot remembers each distinct alias tag as congruence pressure.  When the
  number of distinct aliases reaches the profile's eviction threshold the
  resident is thrown out and must be relearned from scratch.

On cores with PC-indexed pressure, base-slot pressure reaching the
threshold also evicts the victim's entries in the history tables, so
aliases with a non-matching history still evict (without mistraining).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Optional

from .config import MicroarchProfile
from .history import HistoryValue
from .trace import BranchKind

TABLE_INDEX_BITS = 12
TABLE_TAG_BITS = 16

CTR_MAX = 3
CTR_TAKEN_MIN = 2


@lru_cache(maxsize=1 << 16)
def _fold(value: int, bits: int) -> int:
    mask = (1 << bits) - 1
    out = 0
    while value:
        out ^= value & mask
        value >>= bits
    return out


def _rotl(value: int, r: int, bits: int) -> int:
    mask = (1 << bits) - 1
    return ((value << r) | (value >> (bits - r))) & mask


_INDEX_TAG_CACHE: dict[tuple[int, int], tuple[int, int]] = {}
_INDEX_TAG_CACHE_LIMIT = 1 << 20


def _index_tag(pc: int, hprefix: int) -> tuple[int, int]:
    """Slot index and tag of one (PC, truncated-history) pair.

    The index slices only low PC bits, so congruent branches (equal low 20
    address bits) collide by construction; the tag folds the full PC and
    mixes the history differently, so aliases and other histories stay
    distinguishable.  Results are memoized: scenario histories repeat
    heavily across trials.
    """
    key = (pc, hprefix)
    cached = _INDEX_TAG_CACHE.get(key)
    if cached is not None:
        return cached
    idx = ((pc >> 2) ^ _fold(hprefix, TABLE_INDEX_BITS)) \
        & ((1 << TABLE_INDEX_BITS) - 1)
    tag = _fold(pc >> 2, TABLE_TAG_BITS) ^ _rotl(
        _fold(hprefix, TABLE_TAG_BITS), 5, TABLE_TAG_BITS)
    if len(_INDEX_TAG_CACHE) < _INDEX_TAG_CACHE_LIMIT:
        _INDEX_TAG_CACHE[key] = (idx, tag)
    return idx, tag


@dataclass(slots=True)
class TableEntry:
    tag: int
    pc: int
    is_cond: bool
    ctr: int = 0                      # conditional payload
    target: Optional[int] = None      # indirect payload
    aliens: set = field(default_factory=set)

    @property
    def taken(self) -> bool:
        return self.ctr >= CTR_TAKEN_MIN


@dataclass(frozen=True, slots=True)
class Prediction:
    outcome: None | bool | int   # None / direction / target address
    provider: Optional[int]

    @property
    def no_prediction(self) -> bool:
        return self.outcome is None


NO_PREDICTION = Prediction(None, None)

# (event kind, table index, victim pc, victim is_cond)
EvictEvent = tuple[str, int, int, bool]


class PredictorState:
    __slots__ = ("profile", "tables", "_lengths", "_threshold", "_ctx_tagged",
                 "_pmasks")

    def __init__(self, profile: MicroarchProfile) -> None:
        self.profile = profile
        self._lengths = profile.tage_history_lengths
        self.tables: list[dict[int, TableEntry]] = [dict() for _ in self._lengths]
        self._threshold = profile.btb_evict_threshold
        self._ctx_tagged = profile.mitigations.context_tagging
        unit = 1 if profile.hybrid else profile.phr_footprint_bits
        self._pmasks = tuple((1 << (length * unit)) - 1
                             for length in self._lengths)

    # -- index/tag --------------------------------------------------------

    def _key(self, table: int, pc: int, hist: HistoryValue,
             ctx: int) -> tuple[int, int]:
        idx, tag = _index_tag(pc, hist.bits & self._pmasks[table])
        if self._ctx_tagged:
            tag ^= ctx & ((1 << TABLE_TAG_BITS) - 1)
        return idx, tag

    def _index(self, table: int, pc: int, hist: HistoryValue) -> int:
        return self._key(table, pc, hist, 0)[0]

    def _tag(self, table: int, pc: int, hist: HistoryValue, ctx: int) -> int:
        return self._key(table, pc, hist, ctx)[1]

    def _hit(self, table: int, pc: int, hist: HistoryValue, kind: BranchKind,
             ctx: int) -> Optional[TableEntry]:
        idx, tag = self._key(table, pc, hist, ctx)
        entry = self.tables[table].get(idx)
        if entry is None or entry.tag != tag:
            return None
        if entry.is_cond != (kind is BranchKind.CONDITIONAL):
            return None
        return entry

    # -- prediction -------------------------------------------------------

    def predict(self, pc: int, hist: HistoryValue, kind: BranchKind,
                ctx: int = 0) -> Prediction:
        bits = hist.bits
        is_cond = kind is BranchKind.CONDITIONAL
        ctx_term = (ctx & ((1 << TABLE_TAG_BITS) - 1)) if self._ctx_tagged else 0
        tables = self.tables
        pmasks = self._pmasks
        for i in range(len(tables) - 1, -1, -1):
            idx, tag = _index_tag(pc, bits & pmasks[i])
            entry = tables[i].get(idx)
            if (entry is None or entry.tag != tag ^ ctx_term
                    or entry.is_cond != is_cond):
                continue
            if i == 0 and not self.profile.fallback_to_t0:
                break
            if is_cond:
                return Prediction(entry.ctr >= CTR_TAKEN_MIN, i)
            return Prediction(entry.target, i)
        return NO_PREDICTION

    @staticmethod
    def mispredicted(kind: BranchKind, prediction: Prediction,
                     actual: bool | int) -> bool:
        if prediction.outcome is None:
            # static default: conditionals fall through, indirects stall
            return actual is True if kind is BranchKind.CONDITIONAL else False
        return prediction.outcome != actual

    # -- update -----------------------------------------------------------

    def _step(self, entry: TableEntry, kind: BranchKind,
              actual: bool | int) -> None:
        if entry.is_cond and kind is BranchKind.CONDITIONAL:
            if actual:
                entry.ctr = min(CTR_MAX, entry.ctr + 1)
            else:
                entry.ctr = max(0, entry.ctr - 1)
        elif not entry.is_cond and kind is not BranchKind.CONDITIONAL:
            entry.target = actual

    def _insert(self, table: int, idx: int, tag: int, pc: int,
                kind: BranchKind, actual: bool | int) -> None:
        if kind is BranchKind.CONDITIONAL:
            self.tables[table][idx] = TableEntry(
                tag, pc, True, ctr=CTR_MAX if actual else 0)
        else:
            self.tables[table][idx] = TableEntry(tag, pc, False, target=actual)

    def _evict_slot(self, table: int, idx: int,
                    events: list[EvictEvent]) -> None:
        victim = self.tables[table].pop(idx)
        events.append(("evict", table, victim.pc, victim.is_cond))
        if table == 0 and self.profile.pc_indexed_pressure:
            # PC-indexed pressure: the base-slot victim loses its
            # history-table entries as well.
            for t in range(1, len(self.tables)):
                dead = [i for i, e in self.tables[t].items() if e.pc == victim.pc]
                for i in dead:
                    e = self.tables[t].pop(i)
                    events.append(("evict", t, e.pc, e.is_cond))

    def _alien(self, table: int, idx: int, entry: TableEntry, tag: int,
               kind: BranchKind, actual: bool | int,
               events: list[EvictEvent]) -> bool:
        """Alias touch on a foreign resident; True if the slot was evicted."""
        entry.aliens.add(tag)
        if len(entry.aliens) >= self._threshold:
            self._evict_slot(table, idx, events)
            return True
        self._step(entry, kind, actual)  # shared-counter pollution
        return False

    def _touch(self, table: int, pc: int, hist: HistoryValue, kind: BranchKind,
               actual: bool | int, ctx: int, events: list[EvictEvent]) -> None:
        idx, tag = self._key(table, pc, hist, ctx)
        entry = self.tables[table].get(idx)
        if entry is None:
            self._insert(table, idx, tag, pc, kind, actual)
        elif entry.tag == tag:
            if entry.is_cond == (kind is BranchKind.CONDITIONAL):
                self._step(entry, kind, actual)
            else:
                self._insert(table, idx, tag, pc, kind, actual)
        elif self._alien(table, idx, entry, tag, kind, actual, events):
            self._insert(table, idx, tag, pc, kind, actual)  # newest wins

    def apply_commit(self, pc: int, hist: HistoryValue, kind: BranchKind,
                     actual: bool | int, prediction: Prediction,
                     ctx: int = 0) -> list[EvictEvent]:
        """Fold one architecturally resolved branch into the tables."""
        events: list[EvictEvent] = []
        touched: set[int] = set()
        provider = prediction.provider
        if provider is not None:
            entry = self._hit(provider, pc, hist, kind, ctx)
            if entry is not None:
                self._step(entry, kind, actual)
            touched.add(provider)
            if self.mispredicted(kind, prediction, actual) \
                    and provider + 1 < len(self.tables):
                self._touch(provider + 1, pc, hist, kind, actual, ctx, events)
                touched.add(provider + 1)
        else:
            self._touch(0, pc, hist, kind, actual, ctx, events)
            touched.add(0)
            if len(self.tables) > 1:
                self._touch(1, pc, hist, kind, actual, ctx, events)
                touched.add(1)
        for i in range(len(self.tables)):
            if i in touched:
                continue
            idx, tag = self._key(i, pc, hist, ctx)
            entry = self.tables[i].get(idx)
            if entry is not None and entry.tag != tag:
                self._alien(i, idx, entry, tag, kind, actual, events)
        return events

    # -- direct manipulation ----------------------------------------------

    def evict_for_test(self, pc: int, hist: HistoryValue,
                       ctx: int = 0) -> list[EvictEvent]:
        """Scenario hook: drop the (pc, history) entries without mistraining."""
        events: list[EvictEvent] = []
        for i in range(len(self.tables)):
            idx, tag = self._key(i, pc, hist, ctx)
            entry = self.tables[i].get(idx)
            if entry is not None and entry.tag == tag:
                del self.tables[i][idx]
                events.append(("evict", i, entry.pc, entry.is_cond))
        if not events:
            events.append(("warning-missing-entry", -1, pc, False))
        return events

    def flush(self) -> None:
        for t in self.tables:
            t.clear()

    # -- inspection ---------------------------------------------------------

    def entry_at(self, table: int, pc: int, hist: HistoryValue,
                 ctx: int = 0) -> Optional[TableEntry]:
        idx, tag = self._key(table, pc, hist, ctx)
        entry = self.tables[table].get(idx)
        if entry is not None and entry.tag == tag:
            return entry
        return None

    def base_entry(self, pc: int, ctx: int = 0) -> Optional[TableEntry]:
        # table 0 has history length 0, so any HistoryValue works
        return self.entry_at(0, pc, HistoryValue(0, 0, 1), ctx)

    def occupancy(self) -> list[int]:
        return [len(t) for t in self.tables]

    def dump(self) -> list[dict]:
        out = []
        for i, t in enumerate(self.tables):
            for idx, e in sorted(t.items()):
                out.append({
                    "table": i, "index": idx, "tag": e.tag, "pc": e.pc,
                    "payload": ("ctr", e.ctr) if e.is_cond else ("target", e.target),
                    "pressure": len(e.aliens),
                })
        return out
