"""Attack-flow scenarios and their trial runners.

Each scenario builds its traces programmatically from the spec's address
parameters: the aliasing that drives these flows lives in specific address
bits (status-table index bits [15:4], prediction-table index bits [13:2]),
which is too error-prone to hand-write.  Region bases below are chosen so
that distinct branches never collide in either index space unless the
collision is the point (eviction snippets, senders, mistrain copies).

Trials are independent: each runs on a fresh engine and is a pure function
of (spec, trial index), so the runner may fan trials out across processes
and reduce deterministically by index.
"""

from __future__ import annotations

import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

from .config import (MicroarchProfile, ScenarioId, ScenarioSpec,
                     validate_scenario)
from .engine import Engine, inject_noise
from .trace import TraceBuilder, TraceProgram

# Region constants (see module docstring).  Branch regions are audited for
# index disjointness in the test suite; data cells and landing blocks hold
# no conditional/indirect branches and may live anywhere.
COND_PAD_BASE = 0x0050_A800    # predictor idx 0xA00+, BST idx 0xA80+
IND_PAD_BASE = 0x0052_6400     # predictor idx 0x900+, BST idx 0x640+
IND_PAD_PTR_BASE = 0x0070_8000
IND_PAD_TGT_BASE = 0x0073_0000
BH_PTR_BASE = 0x0070_0000
BH_LAND_BASE = 0x0074_0000
PRIME_LAND_BASE = 0x0076_0000
PRED_PTR = 0x0070_1000
PROBE_LINE = 0x0078_0000
FLAG_CELL = 0x0071_0000
NOISE_ALIAS_DELTA = 0x0200_0000
CONGRUENT_DELTA = 0x0010_0000  # mistrain copies: same low 20 address bits
MISTRAIN_REPS = 4

KERNEL_CTX = 0
ATTACKER_CTX = 2
SENDER_KERNEL_CTX = 7


@dataclass
class ScenarioResult:
    scenario: str
    profile: str
    trials: int
    successes: int
    success_rate: float
    status: str = "ok"  # ok | unsupported | structural_failure
    reason: str = ""
    details: dict = field(default_factory=dict)
    curves: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "scenario": self.scenario,
            "profile": self.profile,
            "trials": self.trials,
            "successes": self.successes,
            "success_rate": self.success_rate,
            "status": self.status,
            "reason": self.reason,
            "details": self.details,
            "curves": self.curves,
        }


def _trial_rng(spec: ScenarioSpec, trial: int) -> random.Random:
    return random.Random((spec.seed * 1_000_003) ^ trial)


# Programs depend only on (scenario, profile, params), not the trial index,
# so each worker process builds them once.
_PROGRAM_CACHE: dict = {}


def _spec_key(spec: ScenarioSpec, *extra) -> tuple:
    return (spec.scenario.value, spec.profile.name,
            repr(sorted(spec.params.items())), extra)


def _cached_programs(key: tuple, build: Callable[[], object]) -> object:
    if key not in _PROGRAM_CACHE:
        _PROGRAM_CACHE[key] = build()
    return _PROGRAM_CACHE[key]


# ---------------------------------------------------------------------------
# shared trace fragments
# ---------------------------------------------------------------------------

def _cond_pad_pc(i: int) -> int:
    # the low-nibble stagger varies address bits [3:2] so pad footprints
    # differ on path-history cores
    return COND_PAD_BASE + i * 0x40 + (i & 3) * 4


def _emit_cond_pads(b: TraceBuilder, count: int,
                    not_taken_at: Optional[int] = None) -> None:
    """Const-direction conditional chain that fully populates the outcome
    history.  `not_taken_at` flips one pad, producing a distinct history."""
    for i in range(count):
        taken = i != not_taken_at
        b.bcond(const_taken=taken, taken="__succ__", at=_cond_pad_pc(i))


def _ind_pad_cells(profile: MicroarchProfile) -> tuple[list[int], dict, dict]:
    """Pointer cells and the two target sets for the indirect pad chain."""
    n = profile.phr_capacity
    ptrs = [IND_PAD_PTR_BASE + i * 0x40 for i in range(n)]
    lo = profile.phr_source_lo
    mask = (1 << profile.phr_footprint_bits) - 1
    tgt_a = {ptrs[i]: IND_PAD_TGT_BASE + i * 0x100 + ((i & mask) << lo)
             for i in range(n)}
    tgt_b = {ptrs[i]: IND_PAD_TGT_BASE + i * 0x100 + 0x40 + (((i + 1) & mask) << lo)
             for i in range(n)}
    return ptrs, tgt_a, tgt_b


def _emit_ind_pads(b: TraceBuilder, profile: MicroarchProfile,
                   ptrs: list[int], tgt_a: dict, tgt_b: dict,
                   tail: str) -> None:
    """Indirect pad chain; both target sets land on glue jumps onward."""
    n = len(ptrs)
    for i in range(n):
        nxt = f"_ipad{i + 1}" if i + 1 < n else tail
        b.label(f"_ipad{i}")
        b.br(ptrs[i], at=IND_PAD_BASE + i * 0x40)
        b.b(nxt, at=tgt_a[ptrs[i]])
        b.b(nxt, at=tgt_b[ptrs[i]])


def _pad_count(profile: MicroarchProfile) -> int:
    return profile.bhb_capacity if profile.hybrid else profile.phr_capacity


def _history_preamble(b: TraceBuilder, profile: MicroarchProfile,
                      ind_pads: Optional[tuple] = None,
                      not_taken_at: Optional[int] = None,
                      tail: str = "_body") -> None:
    """Fully populate all history registers so every run of a flow sees the
    same value at its payload branches, regardless of residue."""
    _emit_cond_pads(b, _pad_count(profile), not_taken_at)
    if ind_pads is not None:
        ptrs, tgt_a, tgt_b = ind_pads
        _emit_ind_pads(b, profile, ptrs, tgt_a, tgt_b, tail)
    b.label(tail)


# ---------------------------------------------------------------------------
# Spectre-BSE
# ---------------------------------------------------------------------------

def _bse_layout(spec: ScenarioSpec):
    profile = spec.profile
    p = spec.params
    bh = list(p["bh_addrs"])
    n = len(bh)
    ptrs = [BH_PTR_BASE + i * 0x40 for i in range(n)]
    lo = profile.phr_source_lo
    mask = (1 << profile.phr_footprint_bits) - 1
    fp_a = [i & mask for i in range(n)]
    fp_b = [(i + 1) & mask for i in range(n)]
    tgt_a = [BH_LAND_BASE + i * 0x100 + (fp_a[i] << lo) for i in range(n)]
    tgt_b = [BH_LAND_BASE + i * 0x100 + 0x40 + (fp_b[i] << lo) for i in range(n)]
    return bh, ptrs, tgt_a, tgt_b


def _bse_chain(b: TraceBuilder, bh, ptrs, tgt_a, tgt_b, tail: str) -> None:
    n = len(bh)
    for i in range(n):
        nxt = f"_bh{i + 1}" if i + 1 < n else tail
        b.label(f"_bh{i}")
        b.br(ptrs[i], at=bh[i])
        b.b(nxt, at=tgt_a[i])
        b.b(nxt, at=tgt_b[i])


def _ctx_wrap(b: TraceBuilder, mode: str, enter: bool) -> None:
    if mode == "syscall":
        b.ctx(KERNEL_CTX if enter else 1, "syscall")


def _bse_programs(spec: ScenarioSpec):
    profile = spec.profile
    p = spec.params
    mode = p.get("context_mode", "intra")
    bh, ptrs, tgt_a, tgt_b = _bse_layout(spec)

    def victim_flow(include_pred: bool, attack: bool) -> TraceProgram:
        b = TraceBuilder()
        if attack:
            b.flush(PROBE_LINE)
            b.flush(PRED_PTR)
        _ctx_wrap(b, mode, enter=True)
        _emit_cond_pads(b, _pad_count(profile))
        _bse_chain(b, bh, ptrs, tgt_a, tgt_b, "_tail")
        b.label("_tail")
        if include_pred:
            b.br(PRED_PTR, at=p["bi_pred"])
            b.load(PROBE_LINE, at=p["t_leak"])
            b.b("_end")
            b.straight(1, at=p["t_safe"])
            b.b("_end")
            b.label("_end")
        else:
            b.straight(1)
        _ctx_wrap(b, mode, enter=False)
        b.halt()
        return b.build()

    def evictor(pc: int) -> TraceProgram:
        b = TraceBuilder()
        if mode == "process":
            b.ctx(ATTACKER_CTX, "process")
        b.bcond(const_taken=True, taken="__succ__", at=pc)
        if mode == "process":
            b.ctx(0, "process")
        b.halt()
        return b.build()

    probe = TraceBuilder()
    probe.probe(PROBE_LINE)
    probe.halt()

    mem_a = {ptrs[i]: tgt_a[i] for i in range(len(bh))}
    mem_b = {ptrs[i]: tgt_b[i] for i in range(len(bh))}
    return {
        "prime": victim_flow(include_pred=False, attack=False),
        "flow": victim_flow(include_pred=True, attack=False),
        "attack": victim_flow(include_pred=True, attack=True),
        "evict": evictor(p["bx_evict"]),
        "probe": probe.build(),
        "mem_a": mem_a,
        "mem_b": mem_b,
    }


def _bse_trial(spec: ScenarioSpec, trial: int) -> dict:
    p = spec.params
    progs = _cached_programs(_spec_key(spec), lambda: _bse_programs(spec))
    rng = _trial_rng(spec, trial)
    eng = Engine(spec.profile)

    eng.run(progs["prime"], mem=progs["mem_a"])
    eng.run(progs["prime"], mem=progs["mem_b"])
    train = None
    for _ in range(2):
        train = eng.run(progs["flow"], mem={**progs["mem_a"], PRED_PTR: p["t_leak"]})
    if p.get("evict", True):
        eng.run(progs["evict"])
    noisy = spec.noise > 0 and rng.random() < spec.noise
    if noisy:
        # contention: a stray taken conditional evicting another chain entry
        candidates = [a for a in p["bh_addrs"] if a not in p["b_ev"]]
        b = TraceBuilder()
        b.bcond(const_taken=True, taken="__succ__",
                at=rng.choice(candidates) + NOISE_ALIAS_DELTA)
        b.halt()
        eng.run(b.build())
    attack = eng.run(progs["attack"], mem={**progs["mem_b"], PRED_PTR: p["t_safe"]})
    probe = eng.run(progs["probe"])

    train_ev = train.events_at(p["bi_pred"])[-1]
    atk_ev = attack.events_at(p["bi_pred"])[-1]
    hit = probe.probe_latency(PROBE_LINE) == eng.cache.hit_latency
    success = (atk_ev.predicted == p["t_leak"]
               and atk_ev.actual == p["t_safe"]
               and hit)
    return {
        "success": success,
        "eq2": atk_ev.history_bits == train_ev.history_bits,
        "probe_hit": hit,
        "speculated_target": atk_ev.predicted,
    }


def run_spectre_bse(spec: ScenarioSpec, jobs: int = 1) -> ScenarioResult:
    rows = _map_trials(_bse_trial, spec, jobs)
    successes = sum(r["success"] for r in rows)
    targets: dict[str, int] = {}
    for r in rows:
        key = hex(r["speculated_target"]) if r["speculated_target"] else "none"
        targets[key] = targets.get(key, 0) + 1
    return ScenarioResult(
        scenario=spec.scenario.value, profile=spec.profile.name,
        trials=spec.trials, successes=successes,
        success_rate=successes / spec.trials,
        details={
            "eq2_collision_rate": sum(r["eq2"] for r in rows) / spec.trials,
            "probe_hit_rate": sum(r["probe_hit"] for r in rows) / spec.trials,
            "speculated_targets": targets,
            "context_mode": spec.params.get("context_mode", "intra"),
            "evict": spec.params.get("evict", True),
        })


# ---------------------------------------------------------------------------
# BiasScope
# ---------------------------------------------------------------------------

_PRIME_T1 = PRIME_LAND_BASE + 0x10   # footprint 1
_PRIME_T2 = PRIME_LAND_BASE + 0x60   # footprint 2


def _biasscope_programs(spec: ScenarioSpec):
    profile = spec.profile
    p = spec.params
    bh = list(p["bh_addrs"])[: profile.phr_capacity]
    n = len(bh)
    ptrs = [BH_PTR_BASE + i * 0x40 for i in range(n)]
    lo = profile.phr_source_lo
    mask = (1 << profile.phr_footprint_bits) - 1
    tgt_a = [BH_LAND_BASE + i * 0x100 + ((i & mask) << lo) for i in range(n)]
    tgt_b = [BH_LAND_BASE + i * 0x100 + 0x40 + (((i + 1) & mask) << lo)
             for i in range(n)]
    mem_a = {ptrs[i]: tgt_a[i] for i in range(n)}
    mem_b = {ptrs[i]: tgt_b[i] for i in range(n)}
    prime_ptr = 0x0070_2000

    def chain(b: TraceBuilder, tail: str) -> None:
        for i in range(n):
            nxt = f"_bh{i + 1}" if i + 1 < n else tail
            b.label(f"_bh{i}")
            b.br(ptrs[i], at=bh[i])
            b.b(nxt, at=tgt_a[i])
            b.b(nxt, at=tgt_b[i])

    def receiver(channel_pc: Optional[int], attack: bool) -> TraceProgram:
        """Flow A (channel None) or flow B of one bit channel."""
        b = TraceBuilder()
        if attack:
            b.flush(PROBE_LINE)
            b.flush(PRED_PTR)
        _emit_cond_pads(b, _pad_count(profile))
        chain(b, "_x")
        b.label("_x")
        if channel_pc is not None:
            b.br(prime_ptr, at=channel_pc)
            b.b("_pred", at=_PRIME_T1)
            b.b("_pred", at=_PRIME_T2)
        b.label("_pred")
        b.br(PRED_PTR, at=p["bi_pred"])
        b.load(PROBE_LINE, at=p["t_primary"])
        b.b("_end")
        b.straight(1, at=p["t_alt"])
        b.b("_end")
        b.label("_end")
        b.halt()
        return b.build()

    def chain_prime() -> TraceProgram:
        b = TraceBuilder()
        _emit_cond_pads(b, _pad_count(profile))
        chain(b, "_e")
        b.label("_e")
        b.halt()
        return b.build()

    def prime(channel_pc: int) -> TraceProgram:
        b = TraceBuilder()
        b.br(prime_ptr, at=channel_pc)
        b.b("_e", at=_PRIME_T1)
        b.b("_e", at=_PRIME_T2)
        b.label("_e")
        b.halt()
        return b.build()

    def sender(pc: int, taken: bool) -> TraceProgram:
        # the secret-dependent branch runs in the victim context; the
        # trailing switch returns to the receiver's context (0)
        mode = p.get("context_mode", "intra")
        b = TraceBuilder()
        if mode == "syscall":
            b.ctx(SENDER_KERNEL_CTX, "syscall")
        elif mode == "process":
            b.ctx(ATTACKER_CTX, "process")
        b.bcond(const_taken=taken, taken="__succ__", at=pc)
        if mode != "intra":
            b.ctx(0, mode)
        b.halt()
        return b.build()

    probe = TraceBuilder()
    probe.probe(PROBE_LINE)
    probe.halt()
    return (mem_a, mem_b, prime_ptr, receiver, chain_prime(), prime, sender,
            probe.build())


def _biasscope_built(spec: ScenarioSpec):
    """All BiasScope programs, prebuilt per (channel, role)."""
    (mem_a, mem_b, prime_ptr, receiver, chain_prime, prime, sender,
     probe_prog) = _biasscope_programs(spec)
    primes = spec.params["bx_prime_addrs"]
    senders = spec.params["sender_addrs"]
    recv = {(None, False): receiver(None, False)}
    prim = {}
    send = {}
    for ch in range(8):
        recv[(ch, False)] = receiver(primes[ch], False)
        recv[(ch, True)] = receiver(primes[ch], True)
        prim[ch] = prime(primes[ch])
        send[(ch, True)] = sender(senders[ch], True)
        send[(ch, False)] = sender(senders[ch], False)
        send[(ch, "noise")] = sender(primes[ch] + NOISE_ALIAS_DELTA, True)
    return mem_a, mem_b, prime_ptr, recv, prim, send, chain_prime, probe_prog


def _biasscope_trial(spec: ScenarioSpec, trial: int) -> dict:
    p = spec.params
    rng = _trial_rng(spec, trial)
    (mem_a, mem_b, prime_ptr, receiver, prime, sender, chain_prime,
     probe_prog) = _cached_programs(_spec_key(spec),
                                    lambda: _biasscope_built(spec))
    secret = p["secret_byte"] & 0xFF
    eng = Engine(spec.profile)
    # the history chain must be non-biased to populate the path history
    eng.run(chain_prime, mem=mem_b)
    eng.run(chain_prime, mem=mem_a)
    bits = []
    for ch in range(8):
        secret_bit = (secret >> (7 - ch)) & 1
        # establish the channel's non-biased record with alternating targets
        eng.run(prime[ch], mem={prime_ptr: _PRIME_T2})
        eng.run(prime[ch], mem={prime_ptr: _PRIME_T1})
        # train flow B for this channel, then let the victim run
        eng.run(receiver[(ch, False)],
                mem={prime_ptr: _PRIME_T1, PRED_PTR: p["t_alt"]})
        eng.run(sender[(ch, bool(secret_bit))])
        if spec.noise > 0 and rng.random() < spec.noise:
            # core contention: an unrelated taken branch aliasing this slot
            eng.run(sender[(ch, "noise")])
        # observation: refresh flow A, then measure with flow B
        eng.run(receiver[(None, False)], mem={PRED_PTR: p["t_primary"]})
        eng.run(receiver[(ch, True)],
                mem={prime_ptr: _PRIME_T1, PRED_PTR: p["t_alt"]})
        probe = eng.run(probe_prog)
        bit = 1 if probe.probe_latency(PROBE_LINE) == eng.cache.hit_latency else 0
        bits.append(bit)
    decoded = 0
    for bit in bits:
        decoded = (decoded << 1) | bit
    errors = [(decoded >> (7 - ch) & 1) != (secret >> (7 - ch) & 1)
              for ch in range(8)]
    return {"decoded": decoded, "bit_errors": errors,
            "success": decoded == secret}


def run_biasscope(spec: ScenarioSpec, jobs: int = 1) -> ScenarioResult:
    rows = _map_trials(_biasscope_trial, spec, jobs)
    successes = sum(r["success"] for r in rows)
    per_bit = [sum(r["bit_errors"][ch] for r in rows) for ch in range(8)]
    return ScenarioResult(
        scenario=spec.scenario.value, profile=spec.profile.name,
        trials=spec.trials, successes=successes,
        success_rate=successes / spec.trials,
        details={
            "secret_byte": spec.params["secret_byte"] & 0xFF,
            "per_bit_errors": per_bit,
            "per_bit_error_rate": [e / spec.trials for e in per_bit],
            "total_bit_errors": sum(per_bit),
            "noise": spec.noise,
            "context_mode": spec.params.get("context_mode", "intra"),
        })


# ---------------------------------------------------------------------------
# Spectre-BHS (mistrain and evict variants) and the window sweep
# ---------------------------------------------------------------------------

def _bhs_programs(spec: ScenarioSpec, prefix: int = 0,
                  barrier: Optional[bool] = None):
    profile = spec.profile
    p = spec.params
    use_barrier = p.get("barrier", False) if barrier is None else barrier
    ind_pads = _ind_pad_cells(profile) if profile.hybrid else None

    def flow(attack: bool) -> tuple[TraceProgram, int]:
        """The victim flow; returns (program, in-window overhead).

        Overhead counts the budget units spent inside the speculation
        window before the leak prefix plus the leak load itself, so sweeps
        can place the observable step exactly at the configured budget.
        """
        mode = p.get("context_mode", "intra")
        b = TraceBuilder()
        if attack:
            b.flush(PROBE_LINE)
            b.flush(FLAG_CELL)
            b.flush(PRED_PTR)
        if mode == "syscall":
            b.ctx(KERNEL_CTX, "syscall")  # kernel-space victim flow
        _history_preamble(b, profile, ind_pads)
        b.bcond(cond=FLAG_CELL, taken="__succ__", at=p["bx_prime"])
        if use_barrier:
            b.barrier()
        b.br(PRED_PTR, at=p["bi_pred"])
        b.label("_leak")
        if prefix:
            b.straight(prefix, at=p["t_leak"])
            b.load(PROBE_LINE)
        else:
            b.load(PROBE_LINE, at=p["t_leak"])
        b.b("_end")
        b.straight(1, at=p["t_safe"])
        b.b("_end")
        b.label("_end")
        if mode == "syscall":
            b.ctx(1, "syscall")
        b.halt()
        overhead = 2  # Bi_pred prediction + the leak load
        return b.build(), overhead

    def mistrainer(k: int) -> TraceProgram:
        # congruent copy resolving not-taken: flips the flag branch record
        b = TraceBuilder()
        _history_preamble(b, profile, ind_pads)
        b.bcond(const_taken=False, taken="__succ__",
                at=p["bx_prime"] + (k + 1) * CONGRUENT_DELTA)
        b.halt()
        return b.build()

    def evictor(k: int) -> TraceProgram:
        # taken congruent copy under a matching history: builds pressure
        b = TraceBuilder()
        _history_preamble(b, profile, ind_pads)
        b.bcond(const_taken=True, taken="__succ__",
                at=p["bx_prime"] + (k + 1) * CONGRUENT_DELTA)
        b.halt()
        return b.build()

    probe = TraceBuilder()
    probe.probe(PROBE_LINE)
    probe.halt()
    return flow, mistrainer, evictor, probe.build(), ind_pads


def _bhs_built(spec: ScenarioSpec, prefix: int, barrier: Optional[bool]):
    flow, mistrainer, evictor, probe_prog, ind_pads = _bhs_programs(
        spec, prefix, barrier)
    flow_prog, overhead = flow(attack=False)
    attack_prog, _ = flow(attack=True)
    prime_prog = None
    if ind_pads is not None:
        ptrs, tgt_a, tgt_b = ind_pads
        pb = TraceBuilder()
        _emit_ind_pads(pb, spec.profile, ptrs, tgt_a, tgt_b, "_t")
        pb.label("_t")
        pb.halt()
        prime_prog = pb.build()
    mistrain_prog = mistrainer(0)
    evict_progs = [evictor(k) for k in range(spec.profile.btb_evict_threshold)]
    return (flow_prog, attack_prog, overhead, prime_prog, mistrain_prog,
            evict_progs, probe_prog, ind_pads)


def _bhs_trial_impl(spec: ScenarioSpec, trial: int, variant: str,
                    prefix: int = 0, barrier: Optional[bool] = None,
                    budget_override: Optional[int] = None) -> dict:
    p = spec.params
    profile = spec.profile
    (flow_prog, attack_prog, overhead, prime_prog, mistrain_prog, evict_progs,
     probe_prog, ind_pads) = _cached_programs(
        _spec_key(spec, prefix, barrier),
        lambda: _bhs_built(spec, prefix, barrier))
    if budget_override is not None:
        profile = replace(profile,
                          speculation_window_budget=budget_override + overhead)
    eng = Engine(profile)
    if ind_pads is not None:
        ptrs, tgt_a, tgt_b = ind_pads
        eng.run(prime_prog, mem=dict(tgt_a))
        eng.run(prime_prog, mem=dict(tgt_b))
        eng.set_mem(tgt_a)

    # seed run records the flag branch as taken, then train both flows
    eng.run(flow_prog, mem={FLAG_CELL: 1, PRED_PTR: p["t_safe"]})
    for _ in range(2):
        eng.run(flow_prog, mem={FLAG_CELL: 0, PRED_PTR: p["t_leak"]})
    for _ in range(2):
        eng.run(flow_prog, mem={FLAG_CELL: 1, PRED_PTR: p["t_safe"]})

    if variant == "mistrain":
        for _ in range(MISTRAIN_REPS):
            eng.run(mistrain_prog)
    elif variant == "evict":
        for prog in evict_progs:
            eng.run(prog)
    # variant "none": control run without any interference

    rng = _trial_rng(spec, trial)
    atk_prog = attack_prog
    if spec.noise > 0 and rng.random() < spec.noise:
        atk_prog = inject_noise(attack_prog, 1.0, rng.randrange(1 << 30),
                                alias_pc=p["bx_prime"] + NOISE_ALIAS_DELTA)
    attack = eng.run(atk_prog, mem={FLAG_CELL: 1, PRED_PTR: p["t_safe"]})
    probe = eng.run(probe_prog)

    leak_spec = any(e.pc == p["bi_pred"] and e.speculative
                    and e.predicted == p["t_leak"] and e.rolled_back
                    for e in attack.events)
    committed = [e for e in attack.events_at(p["bi_pred"]) if e.committed]
    arch_safe = bool(committed) and committed[-1].actual == p["t_safe"]
    hit = probe.probe_latency(PROBE_LINE) == eng.cache.hit_latency
    return {"success": leak_spec and arch_safe and hit,
            "leak_speculated": leak_spec, "probe_hit": hit}


def _bhs_mistrain_trial(spec: ScenarioSpec, trial: int) -> dict:
    return _bhs_trial_impl(spec, trial, "mistrain")


def _bhs_evict_trial(spec: ScenarioSpec, trial: int) -> dict:
    return _bhs_trial_impl(spec, trial, "evict")


def run_spectre_bhs(spec: ScenarioSpec, jobs: int = 1) -> ScenarioResult:
    variant = ("mistrain" if spec.scenario is ScenarioId.SPECTRE_BHS_MISTRAIN
               else "evict")
    if variant == "evict" and spec.profile.hybrid:
        return ScenarioResult(
            scenario=spec.scenario.value, profile=spec.profile.name,
            trials=0, successes=0, success_rate=0.0, status="unsupported",
            reason=("eviction-induced transient aliasing is not reproducible "
                    "on hybrid outcome-buffer cores: an evicted conditional "
                    "returns to the not-recorded state and binds a third "
                    "history value instead of aliasing the trained flow"))
    fn = _bhs_mistrain_trial if variant == "mistrain" else _bhs_evict_trial
    rows = _map_trials(fn, spec, jobs)
    successes = sum(r["success"] for r in rows)
    return ScenarioResult(
        scenario=spec.scenario.value, profile=spec.profile.name,
        trials=spec.trials, successes=successes,
        success_rate=successes / spec.trials,
        details={"variant": variant,
                 "barrier": spec.params.get("barrier", False),
                 "context_mode": spec.params.get("context_mode", "intra"),
                 "leak_speculated_rate":
                     sum(r["leak_speculated"] for r in rows) / spec.trials})


def run_window_sweep(spec: ScenarioSpec, jobs: int = 1) -> ScenarioResult:
    if spec.profile.hybrid:
        return ScenarioResult(
            scenario=spec.scenario.value, profile=spec.profile.name,
            trials=0, successes=0, success_rate=0.0, status="unsupported",
            reason="window sweep uses the eviction variant (pure-PHR cores only)")
    budget = spec.params["budget"]
    barrier = spec.params.get("barrier", False)
    curves = []
    baseline = []
    for n in spec.params["prefix_lengths"]:
        r = _bhs_trial_impl(spec, trial=n, variant="evict", prefix=n,
                            barrier=barrier, budget_override=budget)
        curves.append({"prefix_n": n, "leak_observed": r["probe_hit"]})
        base = _bhs_trial_impl(spec, trial=n, variant="none", prefix=n,
                               barrier=barrier, budget_override=budget)
        baseline.append({"prefix_n": n, "leak_observed": base["probe_hit"]})
    return ScenarioResult(
        scenario=spec.scenario.value, profile=spec.profile.name,
        trials=len(curves), successes=len(curves), success_rate=1.0,
        details={"budget": budget, "baseline_no_evict": baseline,
                 "barrier": barrier},
        curves=curves)


# ---------------------------------------------------------------------------
# Chimera
# ---------------------------------------------------------------------------

# Architectural outcome cells per flow (1 = the branch is taken).  The two
# training flows deliberately exercise disjoint fragments: flow A covers the
# history part, flow B the fragment behind the shuffle point; the crafted
# speculative path stitches flow A's prefix to flow B's fragment.
CHIMERA_FLOW_CELLS = {
    "train_a": {"line2": 0, "line3": 1, "line5": 1, "line7": 0,
                "line8": 0, "line10": 1},
    "train_b": {"line2": 1, "line3": 0, "line5": 0, "line7": 0,
                "line8": 1, "line10": 0},
    "attack": {"line2": 0, "line3": 0, "line5": 0, "line7": 1,
               "line8": 1, "line10": 1},
}
CHIMERA_CELL_BASE = 0x0072_0000
CHIMERA_INPUTS = {
    "train_a": {"take_sc": False, "esc": False, "set_ptr": True},
    "train_b": {"take_sc": True, "esc": True, "set_ptr": False},
    "attack": {"take_sc": False, "esc": True, "set_ptr": True},
}


def _chimera_cells() -> dict[str, int]:
    return {name: CHIMERA_CELL_BASE + i * 0x40
            for i, name in enumerate(CHIMERA_FLOW_CELLS["attack"])}


def _chimera_program(spec: ScenarioSpec, attack: bool) -> TraceProgram:
    p = spec.params
    lines = p["line_addrs"]
    cells = _chimera_cells()
    b = TraceBuilder()
    if attack:
        # flush every cell the pointer selector feeds (lines 3, 5 and 10)
        for name in ("line3", "line5", "line10"):
            b.flush(cells[name])
    _emit_cond_pads(b, _pad_count(spec.profile))
    b.setreg("params", p["legit_addr"])
    b.bcond(cond=cells["line2"], taken="_l8", at=lines["line2"])
    b.bcond(cond=cells["line3"], taken="_l4", at=lines["line3"])
    b.b("_l5")
    b.label("_l4")
    b.setreg("params", p["secret_addr"])
    b.label("_l5")
    b.bcond(cond=cells["line5"], taken="_l7", at=lines["line5"])
    b.b("_exit")
    b.label("_l7")
    b.bcond(cond=cells["line7"], taken="_l8", at=lines["line7"])
    b.straight(1)  # the guarded no-op
    b.label("_l8")
    b.bcond(cond=cells["line8"], taken="_l10", at=lines["line8"])
    b.b("_exit")
    b.label("_l10")
    b.bcond(cond=cells["line10"], taken="_exit", at=lines["line10"])
    b.loadreg("params")
    b.label("_exit")
    b.halt()
    return b.build()


def _chimera_trial(spec: ScenarioSpec, trial: int) -> dict:
    p = spec.params
    lines = p["line_addrs"]
    cells = _chimera_cells()
    prog, attack_prog = _cached_programs(
        _spec_key(spec),
        lambda: (_chimera_program(spec, False), _chimera_program(spec, True)))
    eng = Engine(spec.profile)

    def cell_mem(flow: str) -> dict[int, int]:
        return {cells[name]: v for name, v in CHIMERA_FLOW_CELLS[flow].items()}

    reports = []
    for _ in range(4):
        reports.append(eng.run(prog, mem=cell_mem("train_b")))
    for _ in range(4):
        reports.append(eng.run(prog, mem=cell_mem("train_a")))

    def t0_state(pc: int):
        e = eng.predictor.base_entry(pc)
        return None if e is None else (e.tag, e.ctr)

    t0_before = {name: t0_state(lines[name]) for name in ("line8", "line10")}
    attack = eng.run(attack_prog, mem=cell_mem("attack"))
    reports.append(attack)
    t0_after = {name: t0_state(lines[name]) for name in ("line8", "line10")}

    secret_speculated = p["secret_addr"] in attack.speculative_loads
    secret_committed = any(p["secret_addr"] in r.committed_loads for r in reports)
    providers = {}
    for name in ("line8", "line10"):
        evs = [e for e in attack.events_at(lines[name]) if e.speculative]
        providers[name] = evs[-1].provider if evs else None
    shuffle_never_taken = all(
        e["payload"][0] != "ctr" or e["payload"][1] < 2
        for e in eng.predictor.dump() if e["pc"] == lines["line7"])
    t0_unchanged = t0_before == t0_after
    success = (secret_speculated and not secret_committed
               and providers["line8"] == 0 and providers["line10"] == 0
               and t0_unchanged and shuffle_never_taken)
    return {
        "success": success,
        "secret_speculated": secret_speculated,
        "secret_committed": secret_committed,
        "fallback_providers": providers,
        "t0_unchanged": t0_unchanged,
        "shuffle_never_taken": shuffle_never_taken,
    }


def run_chimera(spec: ScenarioSpec, jobs: int = 1) -> ScenarioResult:
    rows = _map_trials(_chimera_trial, spec, jobs)
    successes = sum(r["success"] for r in rows)
    result = ScenarioResult(
        scenario=spec.scenario.value, profile=spec.profile.name,
        trials=spec.trials, successes=successes,
        success_rate=successes / spec.trials,
        details={
            "secret_speculated_rate":
                sum(r["secret_speculated"] for r in rows) / spec.trials,
            "secret_committed_any":
                any(r["secret_committed"] for r in rows),
            "t0_entries_stable": all(r["t0_unchanged"] for r in rows),
            "shuffle_never_taken": all(r["shuffle_never_taken"] for r in rows),
        })
    if not spec.profile.fallback_to_t0:
        result.status = "structural_failure"
        result.reason = ("profile does not fall back to PC-only prediction; "
                         "the shuffled history leaves the fragment branches "
                         "unpredicted and the crafted path never forms")
    return result


# ---------------------------------------------------------------------------
# threshold sweep
# ---------------------------------------------------------------------------

def _threshold_point(spec: ScenarioSpec, init_bias: str, mode: str,
                     k: int) -> str:
    p = spec.params
    profile = spec.profile
    victim = p["victim_pc"]
    dc = p["dc_signal"]
    flag = FLAG_CELL + 0x40

    def victim_prog(flushed: bool) -> TraceProgram:
        b = TraceBuilder()
        if flushed:
            b.flush(dc)
            b.flush(flag)
        _emit_cond_pads(b, _pad_count(profile))
        b.bcond(cond=flag, taken="_skip", at=victim)
        b.load(dc)
        b.label("_skip")
        b.halt()
        return b.build()

    # the flipped pad sits next to the newest end so even the shortest
    # table-history prefix sees the difference
    flip_idx = _pad_count(profile) - 2

    def mistrain_prog(idx: int) -> TraceProgram:
        b = TraceBuilder()
        flip = flip_idx if mode == "different" else None
        _emit_cond_pads(b, _pad_count(profile), not_taken_at=flip)
        b.bcond(const_taken=True, taken="__succ__",
                at=victim + (idx + 1) * CONGRUENT_DELTA)
        b.halt()
        return b.build()

    probe = TraceBuilder()
    probe.probe(dc)
    probe.halt()
    probe_prog = probe.build()

    eng = Engine(profile)
    # take the flip pad once so a later not-taken run records a zero bit
    # (hybrid outcome buffers ignore never-taken branches)
    seed = TraceBuilder()
    seed.bcond(const_taken=True, taken="__succ__", at=_cond_pad_pc(flip_idx))
    seed.halt()
    eng.run(seed.build())
    train = victim_prog(flushed=False)
    for _ in range(8):
        eng.run(train, mem={flag: 0 if init_bias == "nt" else 1})
    for idx in range(k):
        mt = mistrain_prog(idx)
        for _ in range(MISTRAIN_REPS):
            eng.run(mt)
    eng.run(victim_prog(flushed=True), mem={flag: 1})
    rep = eng.run(probe_prog)
    hit = rep.probe_latency(dc) == eng.cache.hit_latency
    return "not-taken" if hit else "taken"


def run_threshold_sweep(spec: ScenarioSpec, jobs: int = 1) -> ScenarioResult:
    p = spec.params
    inits = ["nt", "tt"] if p["init_bias"] == "both" else [p["init_bias"]]
    modes = (["matching", "different"] if p["history_mode"] == "both"
             else [p["history_mode"]])
    curves = []
    for init in inits:
        for mode in modes:
            for k in p["k_values"]:
                direction = _threshold_point(spec, init, mode, k)
                curves.append({"K": k, "init_bias": init, "history_mode": mode,
                               "predicted_direction": direction})
    return ScenarioResult(
        scenario=spec.scenario.value, profile=spec.profile.name,
        trials=len(curves), successes=len(curves), success_rate=1.0,
        details={"threshold": spec.profile.btb_evict_threshold},
        curves=curves)


# ---------------------------------------------------------------------------
# runner plumbing
# ---------------------------------------------------------------------------

def _map_trials(fn: Callable[[ScenarioSpec, int], dict], spec: ScenarioSpec,
                jobs: int) -> list[dict]:
    n = spec.trials
    if jobs <= 1 or n < 8:
        return [fn(spec, i) for i in range(n)]
    chunk = max(1, n // (jobs * 4))
    with ProcessPoolExecutor(max_workers=jobs) as ex:
        return list(ex.map(fn, [spec] * n, range(n), chunksize=chunk))


_RUNNERS = {
    ScenarioId.SPECTRE_BSE: run_spectre_bse,
    ScenarioId.BIASSCOPE: run_biasscope,
    ScenarioId.SPECTRE_BHS_MISTRAIN: run_spectre_bhs,
    ScenarioId.SPECTRE_BHS_EVICT: run_spectre_bhs,
    ScenarioId.CHIMERA: run_chimera,
    ScenarioId.THRESHOLD_SWEEP: run_threshold_sweep,
    ScenarioId.WINDOW_SWEEP: run_window_sweep,
}


def run_scenario(spec: ScenarioSpec, jobs: int = 1) -> ScenarioResult:
    spec = validate_scenario(spec)
    return _RUNNERS[spec.scenario](spec, jobs)


def scenario_traces(spec: ScenarioSpec) -> dict[str, TraceProgram]:
    """Named trace programs of a scenario, for the dump-trace command."""
    spec = validate_scenario(spec)
    sid = spec.scenario
    if sid is ScenarioId.SPECTRE_BSE:
        progs = _bse_programs(spec)
        return {k: v for k, v in progs.items() if isinstance(v, TraceProgram)}
    if sid is ScenarioId.BIASSCOPE:
        (_, _, _, receiver, chain_prime, prime, sender,
         probe_prog) = _biasscope_programs(spec)
        ch = spec.params["bx_prime_addrs"][0]
        return {"flow_a": receiver(None, False),
                "flow_b": receiver(ch, False),
                "measure": receiver(ch, True),
                "chain_prime": chain_prime,
                "prime": prime(ch),
                "sender_taken": sender(spec.params["sender_addrs"][0], True),
                "probe": probe_prog}
    if sid in (ScenarioId.SPECTRE_BHS_MISTRAIN, ScenarioId.SPECTRE_BHS_EVICT,
               ScenarioId.WINDOW_SWEEP):
        prefix = 100 if sid is ScenarioId.WINDOW_SWEEP else 0
        flow, mistrainer, evictor, probe_prog, _ = _bhs_programs(spec, prefix)
        return {"flow": flow(False)[0], "attack": flow(True)[0],
                "mistrain": mistrainer(0), "evictor": evictor(0),
                "probe": probe_prog}
    if sid is ScenarioId.CHIMERA:
        return {"train": _chimera_program(spec, False),
                "attack": _chimera_program(spec, True)}
    if sid is ScenarioId.THRESHOLD_SWEEP:
        # representative: the flushed victim run
        p = spec.params
        b = TraceBuilder()
        b.flush(p["dc_signal"])
        b.flush(FLAG_CELL + 0x40)
        _emit_cond_pads(b, _pad_count(spec.profile))
        b.bcond(cond=FLAG_CELL + 0x40, taken="_skip", at=p["victim_pc"])
        b.load(p["dc_signal"])
        b.label("_skip")
        b.halt()
        return {"victim_flushed": b.build()}
    raise ValueError(f"no traces for scenario {sid}")
