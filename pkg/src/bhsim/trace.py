"""Trace programs: the instruction stream fed to the execution engine.

A trace program is a linked sequence of steps, each tagged with a virtual
address.  Addresses matter for prediction-structure indexing (congruence,
tags, status-table slots); sequencing is the emission order, so scattered
branch addresses (aliasing copies far away in the address space) still fall
through to the next emitted step.  Conditional branches read one memory
cell and jump to `taken_target` when taken; indirect branches read their
target from a pointer cell.  A conditional with no cell resolves to a
constant direction and never stalls.

The line-oriented text form (one step per line, opcodes BCOND/BR/B/BL/RET/
SVC/LOAD/FLUSH/BARRIER/PROBE/CTX plus STRAIGHT/SETREG/LOADREG/HALT) is
documented in docs/trace-format.md and round-trips through dump/parse.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Iterator, Optional


class TraceError(Exception):
    pass


class BranchKind(str, Enum):
    CONDITIONAL = "conditional"
    INDIRECT = "indirect"
    DIRECT = "direct"
    CALL = "call"
    RETURN = "return"
    SVC = "svc"


@dataclass(slots=True)
class Branch:
    pc: int
    kind: BranchKind
    cond_addr: Optional[int] = None    # conditional: cell read for direction
    taken_target: Optional[int] = None
    taken_if_nonzero: bool = True
    const_taken: Optional[bool] = None  # conditional without a cell
    ptr_addr: Optional[int] = None     # indirect: cell holding the target
    target: Optional[int] = None       # direct/call/return literal target
    operands: tuple[int, ...] = ()     # cells gating resolution (derived)

    def __post_init__(self) -> None:
        if self.kind is BranchKind.CONDITIONAL and self.cond_addr is not None:
            self.operands = (self.cond_addr,)
        elif self.kind is BranchKind.INDIRECT:
            self.operands = (self.ptr_addr,)

    @property
    def operand_addrs(self) -> tuple[int, ...]:
        return self.operands


@dataclass(slots=True)
class Straight:
    pc: int
    count: int


@dataclass(slots=True)
class Load:
    pc: int
    addr: int


@dataclass(slots=True)
class FlushLine:
    pc: int
    addr: int


@dataclass(slots=True)
class ProbeRead:
    pc: int
    addr: int


@dataclass(slots=True)
class Barrier:
    pc: int


@dataclass(slots=True)
class ContextSwitch:
    pc: int
    ctx: int
    switch_kind: str  # "process" (userspace switch) or "syscall" (privilege)


@dataclass(slots=True)
class SetReg:
    pc: int
    reg: str
    value: int


@dataclass(slots=True)
class LoadReg:
    pc: int
    reg: str


@dataclass(slots=True)
class Halt:
    pc: int


Step = (Branch | Straight | Load | FlushLine | ProbeRead | Barrier
        | ContextSwitch | SetReg | LoadReg | Halt)


class TraceProgram:
    """Steps keyed by address plus a fall-through successor chain."""

    def __init__(self) -> None:
        self.steps: dict[int, Step] = {}
        self.succ: dict[int, int] = {}
        self.labels: dict[str, int] = {}
        self.entry: int = 0
        self._order: list[int] = []

    def step_at(self, pc: int) -> Optional[Step]:
        return self.steps.get(pc)

    def in_order(self) -> Iterator[Step]:
        for pc in self._order:
            yield self.steps[pc]

    def validate(self) -> None:
        for step in self.in_order():
            if isinstance(step, Branch):
                for tgt_attr in ("taken_target", "target"):
                    tgt = getattr(step, tgt_attr)
                    if tgt is not None and tgt not in self.steps:
                        raise TraceError(
                            f"branch at {step.pc:#x}: {tgt_attr} {tgt:#x} "
                            f"has no instruction")
        if self.entry not in self.steps:
            raise TraceError(f"entry {self.entry:#x} has no instruction")


class TraceBuilder:
    """Emits steps at auto-incrementing addresses (override per step)."""

    def __init__(self, base: int = 0x0040_0000) -> None:
        self.prog = TraceProgram()
        self._cursor = base
        self._pending_labels: list[str] = []
        self._fixups: list[tuple[int, str, str]] = []  # (pc, attr, label)

    def label(self, name: str) -> None:
        self._pending_labels.append(name)

    def _place(self, step: Step, at: Optional[int]) -> int:
        pc = self._cursor if at is None else at
        if pc in self.prog.steps:
            raise TraceError(f"duplicate instruction address {pc:#x}")
        step.pc = pc
        self.prog.steps[pc] = step
        if self.prog._order:
            self.prog.succ[self.prog._order[-1]] = pc
        self.prog._order.append(pc)
        for name in self._pending_labels:
            self.prog.labels[name] = pc
        self._pending_labels.clear()
        self._cursor = max(self._cursor, pc) + 4
        return pc

    def _target(self, ref: str | int | None) -> Optional[int]:
        # label refs are fixed up at build(); ints pass through
        return ref if isinstance(ref, int) else None

    def _note_fixup(self, pc: int, attr: str, ref: str | int | None) -> None:
        if isinstance(ref, str):
            self._fixups.append((pc, attr, ref))

    def bcond(self, cond=None, taken=None, taken_if_nonzero: bool = True,
              const_taken: Optional[bool] = None, at: Optional[int] = None) -> int:
        step = Branch(0, BranchKind.CONDITIONAL, cond_addr=cond,
                      taken_target=self._target(taken),
                      taken_if_nonzero=taken_if_nonzero, const_taken=const_taken)
        pc = self._place(step, at)
        self._note_fixup(pc, "taken_target", taken)
        return pc

    def br(self, ptr: int, at: Optional[int] = None) -> int:
        return self._place(Branch(0, BranchKind.INDIRECT, ptr_addr=ptr), at)

    def b(self, to, kind: BranchKind = BranchKind.DIRECT,
          at: Optional[int] = None) -> int:
        step = Branch(0, kind, target=self._target(to))
        pc = self._place(step, at)
        self._note_fixup(pc, "target", to)
        return pc

    def call(self, to, at=None) -> int:
        return self.b(to, BranchKind.CALL, at)

    def ret(self, to, at=None) -> int:
        return self.b(to, BranchKind.RETURN, at)

    def svc(self, at=None) -> int:
        return self._place(Branch(0, BranchKind.SVC), at)

    def straight(self, count: int, at=None) -> int:
        return self._place(Straight(0, count), at)

    def load(self, addr: int, at=None) -> int:
        return self._place(Load(0, addr), at)

    def flush(self, addr: int, at=None) -> int:
        return self._place(FlushLine(0, addr), at)

    def probe(self, addr: int, at=None) -> int:
        return self._place(ProbeRead(0, addr), at)

    def barrier(self, at=None) -> int:
        return self._place(Barrier(0), at)

    def ctx(self, ctx: int, switch_kind: str, at=None) -> int:
        if switch_kind not in ("process", "syscall"):
            raise TraceError(f"unknown context switch kind {switch_kind!r}")
        return self._place(ContextSwitch(0, ctx, switch_kind), at)

    def setreg(self, reg: str, value: int, at=None) -> int:
        return self._place(SetReg(0, reg, value), at)

    def loadreg(self, reg: str, at=None) -> int:
        return self._place(LoadReg(0, reg), at)

    def halt(self, at=None) -> int:
        return self._place(Halt(0), at)

    def build(self, entry: str | int | None = None) -> TraceProgram:
        for pc, attr, name in self._fixups:
            if name == "__succ__":
                # branch that falls through either way (history-only effect)
                if pc not in self.prog.succ:
                    raise TraceError(f"branch at {pc:#x} has no successor")
                setattr(self.prog.steps[pc], attr, self.prog.succ[pc])
                continue
            if name not in self.prog.labels:
                raise TraceError(f"undefined label {name!r}")
            setattr(self.prog.steps[pc], attr, self.prog.labels[name])
        if entry is None:
            self.prog.entry = self.prog._order[0]
        elif isinstance(entry, str):
            self.prog.entry = self.prog.labels[entry]
        else:
            self.prog.entry = entry
        self.prog.validate()
        return self.prog


# ---------------------------------------------------------------------------
# text serialization
# ---------------------------------------------------------------------------

def dump_trace(prog: TraceProgram) -> str:
    lines = [f"ENTRY {prog.entry:#x}"]
    for name in sorted(prog.labels):
        lines.append(f"LABEL {name} {prog.labels[name]:#x}")
    for step in prog.in_order():
        pc = f"@{step.pc:#010x}"
        if isinstance(step, Branch):
            k = step.kind
            if k is BranchKind.CONDITIONAL:
                if step.const_taken is not None:
                    cond = f"const={1 if step.const_taken else 0}"
                else:
                    cond = f"cond={step.cond_addr:#x} taken_if={1 if step.taken_if_nonzero else 0}"
                lines.append(f"{pc} BCOND {cond} -> {step.taken_target:#x}")
            elif k is BranchKind.INDIRECT:
                lines.append(f"{pc} BR ptr={step.ptr_addr:#x}")
            elif k is BranchKind.DIRECT:
                lines.append(f"{pc} B -> {step.target:#x}")
            elif k is BranchKind.CALL:
                lines.append(f"{pc} BL -> {step.target:#x}")
            elif k is BranchKind.RETURN:
                lines.append(f"{pc} RET -> {step.target:#x}")
            else:
                lines.append(f"{pc} SVC")
        elif isinstance(step, Straight):
            lines.append(f"{pc} STRAIGHT {step.count}")
        elif isinstance(step, Load):
            lines.append(f"{pc} LOAD {step.addr:#x}")
        elif isinstance(step, FlushLine):
            lines.append(f"{pc} FLUSH {step.addr:#x}")
        elif isinstance(step, ProbeRead):
            lines.append(f"{pc} PROBE {step.addr:#x}")
        elif isinstance(step, Barrier):
            lines.append(f"{pc} BARRIER")
        elif isinstance(step, ContextSwitch):
            lines.append(f"{pc} CTX {step.ctx} {step.switch_kind}")
        elif isinstance(step, SetReg):
            lines.append(f"{pc} SETREG {step.reg} {step.value:#x}")
        elif isinstance(step, LoadReg):
            lines.append(f"{pc} LOADREG {step.reg}")
        elif isinstance(step, Halt):
            lines.append(f"{pc} HALT")
    return "\n".join(lines) + "\n"


def _kv(parts: list[str]) -> dict[str, str]:
    out = {}
    for p in parts:
        if "=" in p:
            k, v = p.split("=", 1)
            out[k] = v
    return out


def parse_trace(text: str) -> TraceProgram:
    prog = TraceProgram()
    entry: Optional[int] = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if parts[0] == "ENTRY":
            entry = int(parts[1], 0)
            continue
        if parts[0] == "LABEL":
            prog.labels[parts[1]] = int(parts[2], 0)
            continue
        if not parts[0].startswith("@"):
            raise TraceError(f"line {lineno}: expected @pc, got {raw!r}")
        pc = int(parts[0][1:], 0)
        op = parts[1]
        rest = parts[2:]
        kv = _kv(rest)
        step: Step
        if op == "BCOND":
            tgt = int(rest[-1], 0)
            if "const" in kv:
                step = Branch(pc, BranchKind.CONDITIONAL, taken_target=tgt,
                              const_taken=kv["const"] == "1")
            else:
                step = Branch(pc, BranchKind.CONDITIONAL,
                              cond_addr=int(kv["cond"], 0), taken_target=tgt,
                              taken_if_nonzero=kv.get("taken_if", "1") == "1")
        elif op == "BR":
            step = Branch(pc, BranchKind.INDIRECT, ptr_addr=int(kv["ptr"], 0))
        elif op in ("B", "BL", "RET"):
            kind = {"B": BranchKind.DIRECT, "BL": BranchKind.CALL,
                    "RET": BranchKind.RETURN}[op]
            step = Branch(pc, kind, target=int(rest[-1], 0))
        elif op == "SVC":
            step = Branch(pc, BranchKind.SVC)
        elif op == "STRAIGHT":
            step = Straight(pc, int(rest[0], 0))
        elif op == "LOAD":
            step = Load(pc, int(rest[0], 0))
        elif op == "FLUSH":
            step = FlushLine(pc, int(rest[0], 0))
        elif op == "PROBE":
            step = ProbeRead(pc, int(rest[0], 0))
        elif op == "BARRIER":
            step = Barrier(pc)
        elif op == "CTX":
            step = ContextSwitch(pc, int(rest[0], 0), rest[1])
        elif op == "SETREG":
            step = SetReg(pc, rest[0], int(rest[1], 0))
        elif op == "LOADREG":
            step = LoadReg(pc, rest[0])
        elif op == "HALT":
            step = Halt(pc)
        else:
            raise TraceError(f"line {lineno}: unknown opcode {op!r}")
        if pc in prog.steps:
            raise TraceError(f"line {lineno}: duplicate address {pc:#x}")
        if prog._order:
            prog.succ[prog._order[-1]] = pc
        prog._order.append(pc)
        prog.steps[pc] = step
    if entry is None:
        if not prog._order:
            raise TraceError("empty trace")
        entry = prog._order[0]
    prog.entry = entry
    prog.validate()
    return prog
