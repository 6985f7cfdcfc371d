"""Concrete A32 interpreter over a sparse memory image.

The binary is mapped at ``image_base``; ``pc`` values are image addresses
while instruction records and trace ``pc`` fields use file offsets.  Memory
that was never written reads as zero (flagged ``synthetic``) except inside
the mapped image, which reads the file bytes.

Every register and stored value carries a provenance tag: loads of
unmodified image bytes tag the value with their file offset, moves and
loads/stores propagate the tag, and any computation drops it.  Argument
patching relies on these tags to find the literal that produced a value.
"""
from __future__ import annotations

import enum
import json
import logging
from collections import namedtuple
from dataclasses import dataclass, field
from typing import Callable, Optional

from .armdec import (COMPARE_OPS, DP_OPS, LR, PC, SHIFT_OPS, SP, Imm, Instr, Reg, Shifted,
                     WbReg, _canonical_rotation)
from .binfmt import PrgBinary, Role
from .errors import PlcrevError

log = logging.getLogger(__name__)

MASK = 0xFFFFFFFF
RETURN_SENTINEL = 0xFEEDFACC
DEFAULT_STACK_TOP = 0x7FFF0000
USER_MODE = 0x10


class HaltReason(str, enum.Enum):
    Returned = "Returned"
    Breakpoint = "Breakpoint"
    LeftCode = "LeftCode"
    BudgetExhausted = "BudgetExhausted"
    DecodeFault = "DecodeFault"


class EmulationFault(PlcrevError):
    """Semantics the interpreter refuses to guess (e.g. SPSR access)."""


class EmulationHalted(PlcrevError):
    """A run that was expected to return halted for another reason."""


class IncompleteTable(PlcrevError):
    def __init__(self, message, table, missing):
        super().__init__(message)
        self.table = table
        self.missing = missing


TraceRecord = namedtuple("TraceRecord", "kind addr width value pc synthetic")


@dataclass
class AccessTrace:
    records: list = field(default_factory=list)
    stubs: list = field(default_factory=list)  # (pc, target) of intercepted calls

    def reads(self):
        return [r for r in self.records if r.kind == "read"]

    def writes(self):
        return [r for r in self.records if r.kind == "write"]

    def to_jsonl(self) -> str:
        lines = [json.dumps(r._asdict()) for r in self.records]
        lines += [json.dumps({"kind": "stub", "addr": t, "width": 0, "value": 0, "pc": pc, "synthetic": False})
                  for pc, t in self.stubs]
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class RunConfig:
    entry: int
    halt_at: frozenset = frozenset()
    step_budget: int = 10_000_000
    image_base: int = 0

    def __post_init__(self):
        if self.step_budget <= 0:
            raise ValueError("step_budget must be positive")
        self.halt_at = frozenset(self.halt_at)


@dataclass
class MachineState:
    regs: list
    n: int = 0
    z: int = 0
    c: int = 0
    v: int = 0
    mem: dict = field(default_factory=dict)
    step_count: int = 0
    regtags: list = field(default_factory=lambda: [None] * 16)
    memtags: dict = field(default_factory=dict)

    @classmethod
    def zeroed(cls, stack_top: int = DEFAULT_STACK_TOP) -> "MachineState":
        regs = [0] * 16
        regs[SP] = stack_top
        regs[LR] = RETURN_SENTINEL
        return cls(regs)

    def copy(self) -> "MachineState":
        return MachineState(list(self.regs), self.n, self.z, self.c, self.v, dict(self.mem),
                            self.step_count, list(self.regtags), dict(self.memtags))

    @property
    def cpsr(self) -> int:
        return (self.n << 31) | (self.z << 30) | (self.c << 29) | (self.v << 28) | USER_MODE

    def read_word(self, addr: int) -> int:
        return self.mem.get(addr & ~3, 0)

    def fingerprint(self) -> tuple:
        return (tuple(self.regs), self.cpsr, tuple(sorted(self.mem.items())))


# condition evaluators indexed by condition field
_CONDS: list = [
    lambda s: s.z,
    lambda s: not s.z,
    lambda s: s.c,
    lambda s: not s.c,
    lambda s: s.n,
    lambda s: not s.n,
    lambda s: s.v,
    lambda s: not s.v,
    lambda s: s.c and not s.z,
    lambda s: not s.c or s.z,
    lambda s: s.n == s.v,
    lambda s: s.n != s.v,
    lambda s: not s.z and s.n == s.v,
    lambda s: s.z or s.n != s.v,
]


def _shift_imm(value: int, kind: str, amount: int, carry: int):
    """Shift by immediate; returns (result, carry_out)."""
    if kind == "lsl":
        if amount == 0:
            return value, carry
        return (value << amount) & MASK, (value >> (32 - amount)) & 1
    if kind == "lsr":
        if amount == 32:
            return 0, value >> 31
        return value >> amount, (value >> (amount - 1)) & 1
    if kind == "asr":
        signed = value - (1 << 32) if value & 0x80000000 else value
        if amount >= 32:
            return (MASK if signed < 0 else 0), value >> 31
        return (signed >> amount) & MASK, (value >> (amount - 1)) & 1
    if kind == "ror":
        res = ((value >> amount) | (value << (32 - amount))) & MASK
        return res, res >> 31
    # rrx
    return (carry << 31) | (value >> 1), value & 1


def _shift_reg(value: int, kind: str, amount: int, carry: int):
    amount &= 0xFF
    if amount == 0:
        return value, carry
    if kind == "lsl":
        if amount < 32:
            return (value << amount) & MASK, (value >> (32 - amount)) & 1
        return 0, (value & 1) if amount == 32 else 0
    if kind == "lsr":
        if amount < 32:
            return value >> amount, (value >> (amount - 1)) & 1
        return 0, (value >> 31) if amount == 32 else 0
    if kind == "asr":
        if amount >= 32:
            return (MASK if value & 0x80000000 else 0), value >> 31
        return _shift_imm(value, "asr", amount, carry)
    rot = amount & 31
    if rot == 0:
        return value, value >> 31
    return _shift_imm(value, "ror", rot, carry)


class Emulator:
    """Interpreter bound to one binary and image base."""

    def __init__(self, binary: PrgBinary, image_base: int = 0):
        binary.decode()
        self.binary = binary
        self.base = image_base
        self.data = binary.data
        self.size = len(binary.data)
        self.code_lo = binary.sections.code[0]
        self.code_hi = binary.code_end
        self.instrs: dict = {}
        for sub in binary.subroutines:
            for ins in sub.instrs:
                self.instrs[ins.addr] = ins
        self.sub_starts = frozenset(s.start for s in binary.subroutines)
        self._compiled: dict = {}

    # -- memory ---------------------------------------------------------

    def _image_word(self, off: int) -> int:
        return int.from_bytes(self.data[off:off + 4].ljust(4, b"\0"), "little")

    def _word(self, st: MachineState, a: int):
        """Aligned word at image address ``a``: (value, synthetic, file offset or None)."""
        mem = st.mem
        if a in mem:
            return mem[a], False, None
        off = a - self.base
        if 0 <= off < self.size:
            return self._image_word(off), False, off
        return 0, True, None

    def load(self, st: MachineState, addr: int, width: int, pc_off: int, trace: AccessTrace):
        addr &= MASK
        a = addr & ~3
        word, synthetic, img = self._word(st, a)
        shift = (addr & 3) * 8
        if width == 4 and not shift:
            value = word
        elif shift + width * 8 <= 32:
            value = (word >> shift) & ((1 << (width * 8)) - 1)
        else:
            value = 0
            for i in range(width):
                b, syn, _ = self._word(st, (addr + i) & ~3)
                synthetic = synthetic and syn
                value |= ((b >> (((addr + i) & 3) * 8)) & 0xFF) << (8 * i)
            img = None
        trace.records.append(TraceRecord("read", addr, width, value, pc_off, synthetic))
        if img is not None:
            tag = ("literal", img + (addr & 3), width)
        else:
            t = st.memtags.get(addr)
            tag = t[0] if t is not None and t[1] >= width else None
        return value, tag

    def store(self, st: MachineState, addr: int, width: int, value: int, tag, pc_off: int, trace: AccessTrace):
        addr &= MASK
        mask = (1 << (width * 8)) - 1
        value &= mask
        trace.records.append(TraceRecord("write", addr, width, value, pc_off, False))
        if width == 4 and not addr & 3:
            st.mem[addr] = value
        else:
            for i in range(width):
                b = (addr + i) & MASK
                a = b & ~3
                word = self._word(st, a)[0]
                sh = (b & 3) * 8
                st.mem[a] = (word & ~(0xFF << sh) & MASK) | (((value >> (8 * i)) & 0xFF) << sh)
        tags = st.memtags
        for i in range(-3, width):
            t = tags.get(addr + i)
            if t is not None and (i >= 0 or i + t[1] > 0):
                del tags[addr + i]
        if tag is not None:
            tags[addr] = (tag, width)

    # -- execution ------------------------------------------------------

    def run(self, cfg: RunConfig, state: Optional[MachineState] = None):
        if cfg.image_base != self.base:
            raise ValueError("RunConfig.image_base differs from the emulator's image base")
        st = state.copy() if state is not None else MachineState.zeroed()
        trace = AccessTrace()
        base = self.base
        pc = base + cfg.entry
        halt_at = cfg.halt_at
        budget = cfg.step_budget
        steps = 0
        compiled = self._compiled
        reason = None
        while True:
            if pc == RETURN_SENTINEL:
                reason = HaltReason.Returned
                break
            off = pc - base
            if off in halt_at:
                reason = HaltReason.Breakpoint
                break
            if steps >= budget:
                reason = HaltReason.BudgetExhausted
                break
            fn = compiled.get(off)
            if fn is None:
                ins = self.instrs.get(off)
                if ins is None:
                    reason = (HaltReason.DecodeFault if self.code_lo <= off < self.code_hi
                              else HaltReason.LeftCode)
                    break
                if ins.error is not None:
                    reason = HaltReason.DecodeFault
                    break
                fn = compiled[off] = self._compile(ins)
            steps += 1
            nxt = fn(st, trace)
            pc = pc + 4 if nxt is None else nxt
        st.regs[PC] = pc
        st.step_count += steps
        return st, trace, reason

    def _branch(self, st: MachineState, target: int, trace: AccessTrace, pc_off: int, dispatch: bool) -> int:
        target &= MASK
        if target == RETURN_SENTINEL:
            return target
        if dispatch and (target - self.base) not in self.sub_starts:
            # dynamically linked or unpopulated call-table slot: return at once
            trace.stubs.append((pc_off, target))
            st.regs[0] = 0
            st.regtags[0] = None
            return st.regs[LR] & ~1 & MASK
        if target & 1:
            raise EmulationFault("interworking branch to Thumb state", offset=pc_off)
        return target & ~3

    def _compile(self, ins: Instr) -> Callable:
        op = ins.op
        handler = _HANDLERS.get(op)
        if handler is None:
            if op in DP_OPS or op in SHIFT_OPS:
                handler = _compile_dp
            else:
                raise EmulationFault(f"no semantics for {ins.mnemonic}", offset=ins.addr)
        body = handler(self, ins)
        if ins.cond == 14:
            return body
        cond = _CONDS[ins.cond]

        def conditional(st, trace):
            if cond(st):
                return body(st, trace)
            return None
        return conditional


def _pc_value(emu: Emulator, ins: Instr) -> int:
    return (emu.base + ins.addr + 8) & MASK


def _reader(emu: Emulator, ins: Instr, n: int):
    if n == PC:
        pcv = _pc_value(emu, ins)
        return lambda st: pcv
    return lambda st: st.regs[n]


def _op2_reader(emu: Emulator, ins: Instr, o):
    """Returns fn(st) -> (value, carry_out, tag)."""
    if isinstance(o, Imm):
        value = o.value & MASK
        rot = o.rot if o.rot is not None else _canonical_rotation(value)
        if rot == 0:
            return lambda st: (value, st.c, None)
        carry = value >> 31
        return lambda st: (value, carry, None)
    if isinstance(o, Shifted):
        rm = _reader(emu, ins, o.reg.n)
        kind = o.kind
        if isinstance(o.amount, Reg):
            rs = _reader(emu, ins, o.amount.n)
            return lambda st: _shift_reg(rm(st), kind, rs(st), st.c) + (None,)
        amount = o.amount
        return lambda st: _shift_imm(rm(st), kind, amount, st.c) + (None,)
    n = o.n
    if n == PC:
        pcv = _pc_value(emu, ins)
        return lambda st: (pcv, st.c, None)
    return lambda st: (st.regs[n], st.c, st.regtags[n])


def _compile_dp(emu: Emulator, ins: Instr):
    op = ins.op
    ops = ins.operands
    s = ins.s
    pc_off = ins.addr
    if op in SHIFT_OPS:
        rd = ops[0].n
        if op == "rrx":
            src = _op2_reader(emu, ins, Shifted(ops[1], "rrx"))
        else:
            amt = ops[2] if isinstance(ops[2], Reg) else ops[2].value
            src = _op2_reader(emu, ins, Shifted(ops[1], op, amt))
        op = "mov"
        rn_read = None
    elif op in COMPARE_OPS:
        rd = None
        rn_read = _reader(emu, ins, ops[0].n)
        src = _op2_reader(emu, ins, ops[1])
    elif op in ("mov", "mvn"):
        rd = ops[0].n
        rn_read = None
        src = _op2_reader(emu, ins, ops[1])
    else:
        rd = ops[0].n
        rn_read = _reader(emu, ins, ops[1].n)
        src = _op2_reader(emu, ins, ops[2])
    if s and rd == PC:
        def fault(st, trace):
            raise EmulationFault("flag-setting write to pc (SPSR copy) is not modelled", offset=pc_off)
        return fault
    dispatch = op == "mov" and rd == PC and isinstance(ops[1], Reg) and ops[1].n not in (LR, PC)

    def compute(st):
        b, carry, tag = src(st)
        a = rn_read(st) if rn_read is not None else 0
        c_in = st.c
        if op == "mov":
            return b, carry, None, tag
        if op == "mvn":
            return ~b & MASK, carry, None, None
        if op in ("and", "tst"):
            return a & b, carry, None, None
        if op in ("eor", "teq"):
            return a ^ b, carry, None, None
        if op == "orr":
            return a | b, carry, None, None
        if op == "bic":
            return a & ~b & MASK, carry, None, None
        if op in ("add", "cmn", "adc"):
            cin = c_in if op == "adc" else 0
            full = a + b + cin
            r = full & MASK
            return r, full >> 32, ((a ^ r) & (b ^ r)) >> 31, None
        if op in ("sub", "cmp", "sbc"):
            borrow = (1 - c_in) if op == "sbc" else 0
            full = a - b - borrow
            r = full & MASK
            return r, int(full >= 0), ((a ^ b) & (a ^ r)) >> 31, None
        # rsb, rsc
        borrow = (1 - c_in) if op == "rsc" else 0
        full = b - a - borrow
        r = full & MASK
        return r, int(full >= 0), ((a ^ b) & (b ^ r)) >> 31, None

    def execute(st, trace):
        r, carry, overflow, tag = compute(st)
        if s:
            st.n = r >> 31
            st.z = int(r == 0)
            st.c = carry
            if overflow is not None:
                st.v = overflow
        if rd is None:
            return None
        if rd == PC:
            return emu._branch(st, r, trace, pc_off, dispatch)
        st.regs[rd] = r
        st.regtags[rd] = tag
        return None
    return execute


_WIDTH = {"": 4, "t": 4, "b": 1, "bt": 1, "h": 2, "sb": 1, "sh": 2}


def _compile_ldst(emu: Emulator, ins: Instr):
    rt = ins.operands[0].n
    mem = ins.operands[1]
    load = ins.op == "ldr"
    width = _WIDTH[ins.suffix]
    signed = ins.suffix in ("sb", "sh")
    base_read = _reader(emu, ins, mem.base)
    pc_off = ins.addr
    sign = -1 if mem.subtract else 1
    if mem.index is None:
        imm = sign * mem.offset
        offset = lambda st: imm  # noqa: E731
    else:
        idx = _reader(emu, ins, mem.index)
        kind, amount = mem.shift, mem.shift_amount
        if kind == "lsl" and amount == 0:
            offset = lambda st: sign * idx(st)  # noqa: E731
        else:
            offset = lambda st: sign * _shift_imm(idx(st), kind, amount, st.c)[0]  # noqa: E731
    pre = mem.pre
    writeback = (mem.writeback or not pre) and mem.base != PC
    rt_read = _reader(emu, ins, rt)
    bn = mem.base

    def execute(st, trace):
        base = base_read(st)
        addr = (base + offset(st)) & MASK
        ea = addr if pre else base
        if writeback:
            st.regs[bn] = addr
            st.regtags[bn] = None
        if load:
            value, tag = emu.load(st, ea, width, pc_off, trace)
            if signed and value >> (width * 8 - 1):
                value = (value - (1 << (width * 8))) & MASK
                tag = None
            if rt == PC:
                return emu._branch(st, value, trace, pc_off, False)
            st.regs[rt] = value
            st.regtags[rt] = tag
        else:
            value = rt_read(st)
            emu.store(st, ea, width, value, st.regtags[rt] if rt != PC else None, pc_off, trace)
        return None
    return execute


def _compile_lsm(emu: Emulator, ins: Instr):
    base_op, reglist = ins.operands
    bn = base_op.n
    regs = reglist.regs
    count = len(regs)
    mode = ins.suffix
    load = ins.op == "ldm"
    wb = isinstance(base_op, WbReg)
    pc_off = ins.addr
    start_delta = {"ia": 0, "ib": 4, "da": -4 * count + 4, "db": -4 * count}[mode]
    wb_delta = 4 * count if mode in ("ia", "ib") else -4 * count
    pcv = _pc_value(emu, ins)

    def execute(st, trace):
        base = st.regs[bn] if bn != PC else pcv
        addr = (base + start_delta) & MASK
        new_pc = None
        if load:
            loaded = []
            for r in regs:
                loaded.append((r,) + emu.load(st, addr, 4, pc_off, trace))
                addr += 4
            if wb:
                st.regs[bn] = (base + wb_delta) & MASK
                st.regtags[bn] = None
            for r, value, tag in loaded:
                if r == PC:
                    new_pc = value
                else:
                    st.regs[r] = value
                    st.regtags[r] = tag
            if new_pc is not None:
                return emu._branch(st, new_pc, trace, pc_off, False)
        else:
            for r in regs:
                value = pcv if r == PC else st.regs[r]
                emu.store(st, addr, 4, value, st.regtags[r] if r != PC else None, pc_off, trace)
                addr += 4
            if wb:
                st.regs[bn] = (base + wb_delta) & MASK
                st.regtags[bn] = None
        return None
    return execute


def _compile_branch(emu: Emulator, ins: Instr):
    target = (emu.base + ins.operands[0].addr) & MASK
    if ins.op == "bl":
        ret = (emu.base + ins.addr + 4) & MASK

        def bl(st, trace):
            st.regs[LR] = ret
            st.regtags[LR] = None
            return target
        return bl
    return lambda st, trace: target


def _compile_bx(emu: Emulator, ins: Instr):
    rm = _reader(emu, ins, ins.operands[0].n)
    pc_off = ins.addr
    return lambda st, trace: emu._branch(st, rm(st), trace, pc_off, False)


def _compile_mul(emu: Emulator, ins: Instr):
    ops = ins.operands
    rd = ops[0].n
    rm = _reader(emu, ins, ops[1].n)
    rs = _reader(emu, ins, ops[2].n)
    ra = _reader(emu, ins, ops[3].n) if ins.op == "mla" else (lambda st: 0)
    s = ins.s

    def execute(st, trace):
        r = (rm(st) * rs(st) + ra(st)) & MASK
        if s:
            st.n = r >> 31
            st.z = int(r == 0)
        st.regs[rd] = r
        st.regtags[rd] = None
        return None
    return execute


def _compile_mrs(emu: Emulator, ins: Instr):
    rd = ins.operands[0].n
    if ins.operands[1].spsr:
        return _fault(ins, "SPSR does not exist in user mode")

    def execute(st, trace):
        st.regs[rd] = st.cpsr
        st.regtags[rd] = None
    return execute


def _compile_msr(emu: Emulator, ins: Instr):
    psr, src = ins.operands
    if psr.spsr:
        return _fault(ins, "SPSR does not exist in user mode")
    write_flags = bool(psr.mask & 8)
    read = (lambda st: src.value) if isinstance(src, Imm) else _reader(emu, ins, src.n)

    def execute(st, trace):
        if write_flags:
            v = read(st)
            st.n, st.z, st.c, st.v = (v >> 31) & 1, (v >> 30) & 1, (v >> 29) & 1, (v >> 28) & 1
    return execute


def _compile_swi(emu: Emulator, ins: Instr):
    pc_off = ins.addr
    number = ins.operands[0].value

    def execute(st, trace):
        trace.stubs.append((pc_off, number))
    return execute


def _fault(ins: Instr, why: str):
    def execute(st, trace):
        raise EmulationFault(why, offset=ins.addr)
    return execute


_HANDLERS = {
    "ldr": _compile_ldst, "str": _compile_ldst,
    "ldm": _compile_lsm, "stm": _compile_lsm,
    "b": _compile_branch, "bl": _compile_branch, "bx": _compile_bx,
    "mul": _compile_mul, "mla": _compile_mul,
    "mrs": _compile_mrs, "msr": _compile_msr,
    "swi": _compile_swi,
    "nop": lambda emu, ins: (lambda st, trace: None),
}


# --------------------------------------------------------------------------
# module-level operations


def _emulator(binary: PrgBinary, image_base: int) -> Emulator:
    cache = binary.__dict__.setdefault("_emulators", {})
    if image_base not in cache:
        cache[image_base] = Emulator(binary, image_base)
    return cache[image_base]


def run(binary: PrgBinary, cfg: RunConfig, state: Optional[MachineState] = None):
    """Interpret from ``cfg.entry`` until a halt condition; returns (state, trace, reason)."""
    return _emulator(binary, cfg.image_base).run(cfg, state)


@dataclass
class CallTable:
    slots: dict  # slot address -> subroutine start (file offset)
    image_base: int = 0
    missing: list = field(default_factory=list)

    @property
    def sound(self) -> bool:
        return not self.missing

    def __contains__(self, addr) -> bool:
        return addr in self.slots

    def __getitem__(self, addr) -> int:
        return self.slots[addr]

    def __len__(self) -> int:
        return len(self.slots)

    @property
    def slot_range(self) -> tuple:
        if not self.slots:
            return (0, 0)
        return (min(self.slots), max(self.slots) + 4)

    def to_dict(self) -> dict:
        return {"image_base": self.image_base,
                "slots": {f"{k:#x}": v for k, v in sorted(self.slots.items())},
                "missing": self.missing}


def memory_init(binary: PrgBinary):
    subs = [s for s in binary.subroutines if s.role == Role.MemoryInit]
    return subs[-1] if subs else binary.subroutines[-1]


def recover_call_table(binary: PrgBinary, image_base: int = 0,
                       step_budget: int = 10_000_000) -> CallTable:
    """Execute Memory INIT from a zeroed state and read back the call table."""
    mi = memory_init(binary)
    state, trace, reason = run(binary, RunConfig(mi.start, step_budget=step_budget, image_base=image_base))
    if reason != HaltReason.Returned:
        log.warning("Memory INIT halted with %s", reason.value)
    starts = {s.start + image_base: s.start for s in binary.subroutines}
    slots = {}
    for rec in trace.records:
        if rec.kind == "write" and rec.width == 4 and rec.value in starts:
            slots[rec.addr] = starts[rec.value]
    # later writes may have overwritten a slot
    slots = {a: s for a, s in slots.items() if state.mem.get(a) == s + image_base}
    covered = set(slots.values())
    missing = [s.start for s in binary.subroutines if s is not mi and s.start not in covered]
    table = CallTable(slots, image_base, missing)
    if missing:
        raise IncompleteTable(f"{len(missing)} subroutine(s) have no call-table slot", table, missing)
    return table


def global_init(binary: PrgBinary):
    subs = [s for s in binary.subroutines if s.role == Role.GlobalInit]
    return subs[0] if subs else binary.subroutines[0]


def snapshot_globals(binary: PrgBinary, image_base: int = 0,
                     step_budget: int = 10_000_000) -> MachineState:
    """Machine state after Global INIT ran from zeroed memory."""
    gi = global_init(binary)
    state, trace, reason = run(binary, RunConfig(gi.start, step_budget=step_budget, image_base=image_base))
    if reason != HaltReason.Returned:
        raise EmulationHalted(f"Global INIT halted with {reason.value}", offset=state.regs[PC] - image_base)
    state.regs[LR] = RETURN_SENTINEL
    return state
