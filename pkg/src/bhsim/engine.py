"""Deterministic speculative-execution engine over trace programs.

One engine instance models one logical core: global history, optional
branch status table, the tagged predictor, a presence-set data cache, a
small register file, and a memory environment of named cells.  Trials may
run many engines in parallel; a single engine is strictly single-threaded.

Execution model:

* A branch whose operand cells are all cache-present (or that needs none)
  resolves immediately; its prediction is recorded but no wrong-path work
  happens.
* A branch with a cache-missing operand opens a speculation window: the
  prediction supplies the path, the global history is updated speculatively
  at once, and subsequent steps execute speculatively under the window
  budget.  Branches inside a window are predicted immediately and consume
  budget like other instructions; if their operands are present they
  resolve in-window with the actual outcome, otherwise they nest (up to
  depth 4).
* Speculation stalls on budget exhaustion, a barrier, trace end, or an
  off-trace fetch; then all open windows resolve oldest-first.  The first
  mismatch rolls the history back to its checkpoint and discards younger
  speculative effects, except cache fills, which are retained - that
  retention is the side channel.  Confirmed work commits in program order.
* Predictor and status-table writes happen only at commit.  Speculative
  indirect pushes consult the status table read-only.

The final architectural digest covers committed outcomes and committed
data operations only, so it is identical with speculation on or off.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field
from typing import Optional

from .bst import BstTable, direction_outcome
from .config import MicroarchProfile
from .history import HistoryState, HistoryValue
from .predictor import PredictorState, Prediction
from .trace import (Barrier, Branch, BranchKind, ContextSwitch, FlushLine,
                    Halt, Load, LoadReg, ProbeRead, SetReg, Straight,
                    TraceError, TraceProgram)

MAX_NESTED_WINDOWS = 4
CACHE_LINE_SHIFT = 6
HIT_LATENCY = 10
MISS_LATENCY = 200


class CacheModel:
    """Presence-set cache: lines are either resident or not."""
    __slots__ = ("lines", "hit_latency", "miss_latency")

    def __init__(self, hit_latency: int = HIT_LATENCY,
                 miss_latency: int = MISS_LATENCY) -> None:
        if hit_latency >= miss_latency:
            raise ValueError("hit latency must be below miss latency")
        self.lines: set[int] = set()
        self.hit_latency = hit_latency
        self.miss_latency = miss_latency

    @staticmethod
    def line_of(addr: int) -> int:
        return addr >> CACHE_LINE_SHIFT

    def present(self, addr: int) -> bool:
        return self.line_of(addr) in self.lines

    def insert(self, addr: int) -> None:
        self.lines.add(self.line_of(addr))

    def flush(self, addr: int) -> None:
        self.lines.discard(self.line_of(addr))

    def latency(self, addr: int) -> int:
        return self.hit_latency if self.present(addr) else self.miss_latency


@dataclass(slots=True)
class BranchEvent:
    pc: int
    kind: str
    history_bits: int
    predicted: None | bool | int
    provider: Optional[int]
    speculative: bool
    actual: None | bool | int = None
    mispredict: bool = False
    in_window_resolved: bool = False
    committed: bool = False
    rolled_back: bool = False


@dataclass
class ExecutionReport:
    events: list[BranchEvent] = field(default_factory=list)
    speculative_loads: list[int] = field(default_factory=list)
    committed_loads: list[int] = field(default_factory=list)
    probes: list[tuple[int, int]] = field(default_factory=list)
    dangling_windows: int = 0
    arch_digest: str = ""

    def probe_latency(self, addr: int) -> int:
        for a, lat in reversed(self.probes):
            if a == addr:
                return lat
        raise KeyError(f"no probe of address {addr:#x} in this report")

    def events_at(self, pc: int) -> list[BranchEvent]:
        return [e for e in self.events if e.pc == pc]

    def to_dict(self) -> dict:
        """JSON-ready view of the report."""
        return {
            "events": [{
                "pc": e.pc, "kind": e.kind, "history": f"{e.history_bits:#x}",
                "predicted": e.predicted, "provider": e.provider,
                "actual": e.actual, "mispredict": e.mispredict,
                "speculative": e.speculative, "committed": e.committed,
                "rolled_back": e.rolled_back,
            } for e in self.events],
            "speculative_loads": list(self.speculative_loads),
            "committed_loads": list(self.committed_loads),
            "probes": [{"addr": a, "latency": lat} for a, lat in self.probes],
            "dangling_windows": self.dangling_windows,
            "arch_digest": self.arch_digest,
        }


@dataclass(slots=True)
class _Window:
    step: Branch
    prediction: Prediction
    hist: HistoryValue
    token: int
    regs_snapshot: dict
    log_index: int
    missing: tuple[int, ...]
    event: BranchEvent
    actual: None | bool | int = None


class Engine:
    """One simulated core.  State persists across `run` calls."""

    def __init__(self, profile: MicroarchProfile, speculation: bool = True) -> None:
        profile.validate()
        self.profile = profile
        self.speculation = speculation
        self.history = HistoryState(profile)
        self.bst: Optional[BstTable] = (
            BstTable(profile) if profile.bias_free_enabled else None)
        self.predictor = PredictorState(profile)
        self.cache = CacheModel()
        self.mem: dict[int, int] = {}
        self.regs: dict[str, int] = {}
        self.ctx = 0
        self._digest = hashlib.sha256()

    # -- helpers ------------------------------------------------------------

    def set_mem(self, values: dict[int, int]) -> None:
        self.mem.update(values)

    def _eval(self, step: Branch) -> bool | int:
        if step.kind is BranchKind.CONDITIONAL:
            if step.const_taken is not None:
                return step.const_taken
            v = self.mem.get(step.cond_addr, 0)
            return (v != 0) == step.taken_if_nonzero
        if step.kind is BranchKind.INDIRECT:
            if step.ptr_addr not in self.mem:
                raise TraceError(
                    f"indirect branch at {step.pc:#x}: pointer cell "
                    f"{step.ptr_addr:#x} has no value")
            return self.mem[step.ptr_addr]
        raise TraceError(f"branch at {step.pc:#x} is not resolvable")

    def _successor(self, prog: TraceProgram, step: Branch,
                   outcome: bool | int) -> int:
        if step.kind is BranchKind.CONDITIONAL:
            return step.taken_target if outcome else prog.succ[step.pc]
        if step.kind is BranchKind.INDIRECT:
            return outcome
        if step.kind is BranchKind.SVC:
            return prog.succ[step.pc]
        return step.target

    def _digest_add(self, *items) -> None:
        self._digest.update(repr(items).encode())

    def _fire_context_switch(self, step: ContextSwitch) -> None:
        mit = self.profile.mitigations
        if step.switch_kind == "process" and mit.bpu_flush_on_context_switch:
            # BPU flush invalidates all prediction state; restricted to
            # userspace context switches, syscalls stay unprotected.
            self.predictor.flush()
            self.history.clear()
            if self.bst is not None:
                self.bst.clear()
        if step.switch_kind == "syscall" and mit.bhb_clear_on_privilege_switch:
            self.history.clear()
        self.ctx = step.ctx

    def _spec_bias(self, step: Branch, target: int) -> Optional[bool]:
        if self.bst is None or step.kind is not BranchKind.INDIRECT:
            return None
        return self.bst.peek_biased(step.pc, target, self.ctx)

    def _commit_branch(self, step: Branch, prediction: Prediction,
                       hist: HistoryValue, actual: bool | int,
                       event: Optional[BranchEvent],
                       apply_history: bool) -> None:
        kind = step.kind
        taken = bool(actual) if kind is BranchKind.CONDITIONAL else True
        if kind is BranchKind.CONDITIONAL:
            target = step.taken_target
            outcome = direction_outcome(taken)
        elif kind is BranchKind.INDIRECT:
            target = actual
            outcome = actual
        else:
            target = step.target
            outcome = None
        verdict = None
        if self.bst is not None and kind in (BranchKind.CONDITIONAL,
                                             BranchKind.INDIRECT):
            verdict = self.bst.observe(kind, step.pc, outcome, taken, self.ctx)
        if apply_history:
            self.history.update(kind, step.pc, taken, target,
                                biased=verdict.biased if verdict else None)
        if kind in (BranchKind.CONDITIONAL, BranchKind.INDIRECT):
            events = self.predictor.apply_commit(
                step.pc, hist, kind, actual, prediction, self.ctx)
            self._relay_evictions(events)
        if event is not None:
            event.actual = actual
            event.committed = True
            event.mispredict = PredictorState.mispredicted(kind, prediction, actual)
        self._digest_add("br", step.pc, actual)

    def _relay_evictions(self, events) -> None:
        if not self.profile.hybrid:
            return
        for ev in events:
            if ev[0] == "evict" and ev[3]:
                self.history.mark_not_recorded(ev[2])

    def evict_for_test(self, pc: int, hist: HistoryValue) -> None:
        self._relay_evictions(self.predictor.evict_for_test(pc, hist, self.ctx))

    # -- main loop ------------------------------------------------------------

    def run(self, prog: TraceProgram, mem: Optional[dict[int, int]] = None,
            ) -> ExecutionReport:
        if mem:
            self.set_mem(mem)
        report = ExecutionReport()
        budget = self.profile.speculation_window_budget
        windows: list[_Window] = []
        log: list[tuple] = []
        spec_regs: dict[str, int] = {}
        spent = 0
        serialized = False  # a retired barrier drains the next branch
        ip = prog.entry

        def commit_log_entry(entry: tuple) -> None:
            op = entry[0]
            if op == "branch":
                _, step, pred, hv, actual, ev = entry
                assert actual is not None
                self._commit_branch(step, pred, hv, actual, ev,
                                    apply_history=False)
            elif op == "ubranch":
                _, step = entry
                self._digest_add("br", step.pc, True)
            elif op in ("load", "loadreg"):
                report.committed_loads.append(entry[1])
                self._digest_add("ld", entry[1])
            elif op == "reg":
                self.regs[entry[1]] = entry[2]
                self._digest_add("reg", entry[1], entry[2])
            elif op == "flush":
                self._digest_add("flush", entry[1])
            elif op == "probe":
                report.probes.append((entry[1], entry[2]))
                self._digest_add("probe", entry[1])
            elif op == "ctx":
                self._fire_context_switch(entry[1])
                self._digest_add("ctx", entry[1].ctx, entry[1].switch_kind)

        def resolve_windows() -> int:
            """Resolve all open windows oldest-first; next architectural ip."""
            nonlocal spent
            for w in windows:
                for a in w.missing:
                    self.cache.insert(a)  # the pending fills arrive
            mis = None
            for k, w in enumerate(windows):
                w.actual = self._eval(w.step)
                log_entry = log[w.log_index]
                log[w.log_index] = log_entry[:4] + (w.actual, log_entry[5])
                predicted = w.prediction.outcome
                if w.step.kind is BranchKind.CONDITIONAL:
                    predicted = bool(predicted) if predicted is not None else False
                if predicted != w.actual:
                    mis = k
                    break
            if mis is None:
                for entry in log:
                    commit_log_entry(entry)
                for w in reversed(windows):
                    self.history.release(w.token)
                self.regs = dict(spec_regs)
                next_ip = ip
            else:
                w = windows[mis]
                for entry in log[:w.log_index]:
                    commit_log_entry(entry)
                for entry in log[w.log_index + 1:]:
                    if entry[0] == "branch":
                        entry[5].rolled_back = True
                for younger in reversed(windows[mis + 1:]):
                    self.history.release(younger.token)
                self.history.rollback(w.token)
                self._commit_branch(w.step, w.prediction, w.hist, w.actual,
                                    w.event, apply_history=True)
                self.regs = dict(w.regs_snapshot)
                next_ip = self._successor(prog, w.step, w.actual)
            windows.clear()
            log.clear()
            spent = 0
            return next_ip

        while True:
            step = prog.steps.get(ip)
            if step is None:
                if windows:
                    ip = resolve_windows()
                    continue
                raise TraceError(f"architectural fetch at {ip:#x}: no instruction")

            if windows:
                # --- speculative execution ---
                if isinstance(step, (Barrier, Halt)):
                    if isinstance(step, Halt):
                        report.dangling_windows += len(windows)
                    ip = resolve_windows()
                    continue
                cost = step.count if isinstance(step, Straight) else 1
                if spent + cost > budget:
                    ip = resolve_windows()
                    continue
                spent += cost
                if isinstance(step, Branch):
                    kind = step.kind
                    if kind is BranchKind.SVC:
                        log.append(("ubranch", step))
                        ip = prog.succ[step.pc]
                        continue
                    if kind in (BranchKind.DIRECT, BranchKind.CALL,
                                BranchKind.RETURN):
                        self.history.update(kind, step.pc, True, step.target,
                                            speculative=True)
                        log.append(("ubranch", step))
                        ip = step.target
                        continue
                    hv = self.history.read()
                    pred = self.predictor.predict(step.pc, hv, kind, self.ctx)
                    event = BranchEvent(step.pc, kind.value, hv.bits,
                                        pred.outcome, pred.provider,
                                        speculative=True)
                    report.events.append(event)
                    missing = tuple(a for a in step.operands
                                    if not self.cache.present(a))
                    if not missing:
                        actual = self._eval(step)
                        event.actual = actual
                        event.in_window_resolved = True
                        event.mispredict = PredictorState.mispredicted(
                            kind, pred, actual)
                        taken = (bool(actual) if kind is BranchKind.CONDITIONAL
                                 else True)
                        target = (actual if kind is BranchKind.INDIRECT
                                  else step.taken_target)
                        self.history.update(
                            kind, step.pc, taken, target,
                            biased=self._spec_bias(step, target),
                            speculative=True)
                        log.append(("branch", step, pred, hv, actual, event))
                        ip = self._successor(prog, step, actual)
                        continue
                    if pred.no_prediction:
                        # No table knows this (pc, history) and the operands
                        # are unavailable: the already-speculative frontend
                        # has nothing learned to follow, so it stops here.
                        # (An architectural window opener still falls through
                        # on no-prediction; see below.)
                        ip = resolve_windows()
                        continue
                    if len(windows) >= MAX_NESTED_WINDOWS:
                        ip = resolve_windows()
                        continue
                    token = self.history.checkpoint()
                    if kind is BranchKind.CONDITIONAL:
                        spec_taken = (bool(pred.outcome)
                                      if pred.outcome is not None else False)
                        self.history.update(kind, step.pc, spec_taken,
                                            step.taken_target, speculative=True)
                        follow = spec_taken
                    else:
                        self.history.update(
                            kind, step.pc, True, pred.outcome,
                            biased=self._spec_bias(step, pred.outcome),
                            speculative=True)
                        follow = pred.outcome
                    windows.append(_Window(step, pred, hv, token,
                                           dict(spec_regs), len(log), missing,
                                           event))
                    log.append(("branch", step, pred, hv, None, event))
                    ip = self._successor(prog, step, follow)
                elif isinstance(step, Straight):
                    ip = prog.succ[step.pc]
                elif isinstance(step, Load):
                    self.cache.insert(step.addr)  # retained: the side channel
                    report.speculative_loads.append(step.addr)
                    log.append(("load", step.addr))
                    ip = prog.succ[step.pc]
                elif isinstance(step, LoadReg):
                    addr = spec_regs.get(step.reg, self.regs.get(step.reg, 0))
                    self.cache.insert(addr)
                    report.speculative_loads.append(addr)
                    log.append(("loadreg", addr))
                    ip = prog.succ[step.pc]
                elif isinstance(step, SetReg):
                    spec_regs[step.reg] = step.value
                    log.append(("reg", step.reg, step.value))
                    ip = prog.succ[step.pc]
                elif isinstance(step, FlushLine):
                    self.cache.flush(step.addr)
                    log.append(("flush", step.addr))
                    ip = prog.succ[step.pc]
                elif isinstance(step, ProbeRead):
                    lat = self.cache.latency(step.addr)
                    self.cache.insert(step.addr)
                    report.speculative_loads.append(step.addr)
                    log.append(("probe", step.addr, lat))
                    ip = prog.succ[step.pc]
                elif isinstance(step, ContextSwitch):
                    # context switches take effect at commit
                    log.append(("ctx", step))
                    ip = prog.succ[step.pc]
                continue

            # --- architectural execution ---
            if isinstance(step, Branch):
                kind = step.kind
                if kind is BranchKind.SVC:
                    self._digest_add("br", step.pc, True)
                    ip = prog.succ[step.pc]
                    continue
                if kind in (BranchKind.DIRECT, BranchKind.CALL,
                            BranchKind.RETURN):
                    if self.bst is not None:
                        self.bst.observe(kind, step.pc, None, True, self.ctx)
                    self.history.update(kind, step.pc, True, step.target)
                    self._digest_add("br", step.pc, True)
                    ip = step.target
                    continue
                hv = self.history.read()
                pred = self.predictor.predict(step.pc, hv, kind, self.ctx)
                event = BranchEvent(step.pc, kind.value, hv.bits, pred.outcome,
                                    pred.provider, speculative=False)
                report.events.append(event)
                missing = tuple(a for a in step.operands
                                if not self.cache.present(a))
                opens_window = (missing and self.speculation and not serialized
                                and not (kind is BranchKind.INDIRECT
                                         and pred.no_prediction))
                serialized = False
                if opens_window:
                    token = self.history.checkpoint()
                    spec_regs = dict(self.regs)
                    if kind is BranchKind.CONDITIONAL:
                        spec_taken = (bool(pred.outcome)
                                      if pred.outcome is not None else False)
                        self.history.update(kind, step.pc, spec_taken,
                                            step.taken_target, speculative=True)
                        follow = spec_taken
                    else:
                        self.history.update(
                            kind, step.pc, True, pred.outcome,
                            biased=self._spec_bias(step, pred.outcome),
                            speculative=True)
                        follow = pred.outcome
                    windows.append(_Window(step, pred, hv, token,
                                           dict(spec_regs), len(log), missing,
                                           event))
                    log.append(("branch", step, pred, hv, None, event))
                    spent = 0
                    ip = self._successor(prog, step, follow)
                    continue
                for a in missing:
                    self.cache.insert(a)  # stalled until the line arrives
                actual = self._eval(step)
                event.speculative = False
                self._commit_branch(step, pred, hv, actual, event,
                                    apply_history=True)
                ip = self._successor(prog, step, actual)
            elif isinstance(step, Straight):
                ip = prog.succ[step.pc]
            elif isinstance(step, Load):
                self.cache.insert(step.addr)
                report.committed_loads.append(step.addr)
                self._digest_add("ld", step.addr)
                ip = prog.succ[step.pc]
            elif isinstance(step, LoadReg):
                addr = self.regs.get(step.reg, 0)
                self.cache.insert(addr)
                report.committed_loads.append(addr)
                self._digest_add("ld", addr)
                ip = prog.succ[step.pc]
            elif isinstance(step, SetReg):
                self.regs[step.reg] = step.value
                self._digest_add("reg", step.reg, step.value)
                ip = prog.succ[step.pc]
            elif isinstance(step, FlushLine):
                self.cache.flush(step.addr)
                self._digest_add("flush", step.addr)
                ip = prog.succ[step.pc]
            elif isinstance(step, ProbeRead):
                lat = self.cache.latency(step.addr)
                self.cache.insert(step.addr)
                report.probes.append((step.addr, lat))
                self._digest_add("probe", step.addr)
                ip = prog.succ[step.pc]
            elif isinstance(step, Barrier):
                serialized = True  # drain: the next branch resolves in order
                self._digest_add("barrier", step.pc)
                ip = prog.succ[step.pc]
            elif isinstance(step, ContextSwitch):
                self._fire_context_switch(step)
                self._digest_add("ctx", step.ctx, step.switch_kind)
                ip = prog.succ[step.pc]
            elif isinstance(step, Halt):
                break

        report.arch_digest = self._digest.hexdigest()
        return report


def run_trace(prog: TraceProgram, profile: MicroarchProfile,
              mem: Optional[dict[int, int]] = None,
              speculation: bool = True) -> ExecutionReport:
    """Run one trace on a fresh engine."""
    return Engine(profile, speculation=speculation).run(prog, mem=mem)


def probe_latency(report: ExecutionReport, addr: int) -> int:
    return report.probe_latency(addr)


def inject_noise(prog: TraceProgram, p: float, seed: int,
                 alias_pc: int = 0x7F00_0000) -> TraceProgram:
    """With probability p, insert one aliasing taken conditional.

    The contention event lands at a seeded-random position in the step
    sequence; its address (`alias_pc`) determines which status-table and
    prediction slots it contends for.  The branch targets the following
    step, so control flow is unchanged.  Deterministic under `seed`.
    """
    if not 0.0 <= p <= 1.0:
        raise ValueError("noise probability must lie in [0, 1]")
    rng = random.Random(seed)
    if rng.random() >= p:
        return prog
    order = prog._order
    # insert before some step other than the entry
    pos = rng.randrange(1, len(order)) if len(order) > 1 else 0
    if alias_pc in prog.steps:
        raise TraceError(f"noise alias pc {alias_pc:#x} collides with the trace")
    out = TraceProgram()
    out.labels = dict(prog.labels)
    out.entry = prog.entry
    new_order = order[:pos] + [alias_pc] + order[pos:]
    out.steps = dict(prog.steps)
    out.steps[alias_pc] = Branch(alias_pc, BranchKind.CONDITIONAL,
                                 const_taken=True, taken_target=order[pos])
    out._order = new_order
    out.succ = {a: b for a, b in zip(new_order, new_order[1:])}
    return out
