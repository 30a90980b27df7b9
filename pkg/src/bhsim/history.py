"""Global branch history state: pure PHR or hybrid canonical-BHB + PHR.

Two modeled organizations:

* pure PHR: a sliding window of `phr_capacity` multi-bit footprints, pushed
  by every taken branch of any kind; not-taken conditionals leave the state
  unchanged.
* hybrid: an outcome shift register of `bhb_capacity` one-bit conditional
  outcomes XOR'd, on read, with a small PHR of indirect-target footprints.
  Conditional branches stay invisible to the outcome register until their
  first taken execution (the not-recorded state); evicting a branch's
  prediction entry resets it to not-recorded.

Both registers are stored as packed integers with the newest element in the
low bits, so pushes, reads, and checkpoint snapshots are O(1).  The decoded
footprint queue is available for dumps and tests via `footprints()`.

Speculative updates require an open checkpoint; rollback restores the exact
pre-checkpoint state, and nested windows unwind in LIFO order.
"""

from __future__ import annotations

from dataclasses import dataclass

from .config import MicroarchProfile
from .trace import BranchKind


class HistoryContractError(Exception):
    """Speculative update without a checkpoint, or bad rollback token."""


@dataclass(frozen=True, slots=True)
class HistoryValue:
    """Fixed-width packed history as read by the predictor.

    `unit_bits` is the width of one history element (footprint width for a
    pure PHR, one bit for the hybrid XOR view); table history lengths are
    expressed in these units.
    """
    bits: int
    width: int
    unit_bits: int

    def prefix(self, units: int) -> int:
        """The newest `units` history elements, packed."""
        nbits = min(units * self.unit_bits, self.width)
        return self.bits & ((1 << nbits) - 1)


# Pure-PHR pushes come from any taken control transfer; hybrid PHR pushes
# are indirect-only (BR/BLR), widened to direct/call when the profile says
# non-indirect branches update the PHR too.  Returns mirror their exemption
# from status-table eviction and never push on hybrid cores.
_PURE_PUSH_KINDS = frozenset(
    {BranchKind.INDIRECT, BranchKind.DIRECT, BranchKind.CALL, BranchKind.RETURN})
_HYBRID_EXTRA_PUSH_KINDS = frozenset({BranchKind.DIRECT, BranchKind.CALL})


def footprint_of(profile: MicroarchProfile, pc: int, target: int) -> int:
    """Footprint of one taken branch.

    Hybrid cores record target-address bits [source_hi:source_lo] only.
    Pure-PHR cores fold target bits [5:2] with source-PC bits [3:2] into a
    4-bit footprint; the exact fold is a modeling choice, it only needs to
    distinguish taken branches at different addresses.
    """
    if profile.hybrid:
        mask = (1 << profile.phr_footprint_bits) - 1
        return (target >> profile.phr_source_lo) & mask
    tgt_bits = (((target >> 4) & 0b11) << 2) | ((target >> 2) & 0b11)
    return tgt_bits ^ ((pc >> 2) & 0b11)


class HistoryState:
    __slots__ = ("profile", "_hybrid", "_fp_mask", "_phr_bits", "_phr_len",
                 "_phr_mask", "_bhb_bits", "_bhb_len", "_bhb_mask", "_width",
                 "_cond_recorded", "_checkpoints", "_next_token")

    def __init__(self, profile: MicroarchProfile) -> None:
        profile.validate()
        self.profile = profile
        self._hybrid = profile.hybrid
        w = profile.phr_footprint_bits
        self._fp_mask = (1 << w) - 1
        self._phr_bits = 0
        self._phr_len = 0
        self._phr_mask = (1 << (profile.phr_capacity * w)) - 1
        self._bhb_bits = 0
        self._bhb_len = 0
        self._bhb_mask = (1 << profile.bhb_capacity) - 1 if profile.hybrid else 0
        if profile.hybrid:
            self._width = max(profile.bhb_capacity, profile.phr_capacity * w)
        else:
            self._width = profile.phr_capacity * w
        # hybrid only: conditional pcs known to the outcome register
        self._cond_recorded: dict[int, bool] = {}
        self._checkpoints: list[tuple] = []
        self._next_token = 1

    # -- queries ----------------------------------------------------------

    def footprints(self) -> list[int]:
        """Decoded PHR contents, oldest first."""
        w = self.profile.phr_footprint_bits
        out = [(self._phr_bits >> (i * w)) & self._fp_mask
               for i in range(self._phr_len)]
        out.reverse()
        return out

    def phr_len(self) -> int:
        return self._phr_len

    def bhb_len(self) -> int:
        return self._bhb_len

    def dump(self) -> dict[str, str]:
        """Hex view of the registers, for reports and golden traces."""
        out = {"phr": f"{self._phr_bits:#x}",
               "footprints": "".join(f"{fp:x}" for fp in self.footprints()),
               "value": f"{self.read().bits:#x}"}
        if self._hybrid:
            out["bhb"] = f"{self._bhb_bits:#0{2 + (self.profile.bhb_capacity + 3) // 4}x}"
        return out

    def read(self) -> HistoryValue:
        if self._hybrid:
            return HistoryValue(self._bhb_bits ^ self._phr_bits, self._width, 1)
        return HistoryValue(self._phr_bits, self._width,
                            self.profile.phr_footprint_bits)

    # -- updates ----------------------------------------------------------

    def _push_phr(self, fp: int) -> None:
        self._phr_bits = ((self._phr_bits << self.profile.phr_footprint_bits)
                          | (fp & self._fp_mask)) & self._phr_mask
        self._phr_len = min(self._phr_len + 1, self.profile.phr_capacity)

    def _push_bhb(self, bit: int) -> None:
        self._bhb_bits = ((self._bhb_bits << 1) | bit) & self._bhb_mask
        self._bhb_len = min(self._bhb_len + 1, self.profile.bhb_capacity)

    def update(self, kind: BranchKind, pc: int, taken: bool, target: int,
               biased: bool | None = None, speculative: bool = False) -> None:
        """Apply one resolved or predicted branch outcome.

        `biased` is the status-table verdict for indirect branches on
        bias-free cores; biased footprints are excluded.  Speculative
        updates require an open checkpoint so they can be unwound.
        """
        if speculative and not self._checkpoints:
            raise HistoryContractError(
                "speculative history update without an open checkpoint")
        p = self.profile
        if kind is BranchKind.SVC:
            return
        if not self._hybrid:
            if kind is BranchKind.CONDITIONAL:
                if taken:
                    self._push_phr(footprint_of(p, pc, target))
            elif kind in _PURE_PUSH_KINDS:
                self._push_phr(footprint_of(p, pc, target))
            return
        # hybrid
        if kind is BranchKind.CONDITIONAL:
            if pc not in self._cond_recorded:
                if not taken:
                    return  # never-taken: not recorded, no update
                self._cond_recorded[pc] = True
            self._push_bhb(1 if taken else 0)
            if taken and p.conditional_updates_phr:
                self._push_phr(footprint_of(p, pc, target))
        elif kind is BranchKind.INDIRECT:
            if not biased:
                self._push_phr(footprint_of(p, pc, target))
        elif kind in _HYBRID_EXTRA_PUSH_KINDS and p.conditional_updates_phr:
            self._push_phr(footprint_of(p, pc, target))

    def mark_not_recorded(self, pc: int) -> None:
        """Prediction-entry eviction resets a conditional to not-recorded."""
        self._cond_recorded.pop(pc, None)

    def clear(self) -> None:
        """History sanitization (BHB-clear style mitigation)."""
        self._phr_bits = 0
        self._phr_len = 0
        self._bhb_bits = 0
        self._bhb_len = 0

    # -- checkpoints ------------------------------------------------------

    def checkpoint(self) -> int:
        token = self._next_token
        self._next_token += 1
        self._checkpoints.append(
            (token, self._phr_bits, self._phr_len, self._bhb_bits,
             self._bhb_len, dict(self._cond_recorded)))
        return token

    def _pop(self, token: int) -> tuple:
        if not self._checkpoints or self._checkpoints[-1][0] != token:
            raise HistoryContractError(
                f"checkpoint token {token} is not on top of the stack")
        return self._checkpoints.pop()

    def rollback(self, token: int) -> None:
        _, self._phr_bits, self._phr_len, self._bhb_bits, self._bhb_len, rec = \
            self._pop(token)
        self._cond_recorded = rec

    def release(self, token: int) -> None:
        """Confirm a speculated window: drop its checkpoint, keep the state."""
        self._pop(token)

    def open_checkpoints(self) -> int:
        return len(self._checkpoints)
