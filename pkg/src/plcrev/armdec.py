"""A32 (little-endian ARM) decoder, encoder and assembler for the compiler subset.

Only the instruction classes a CODESYS-style code generator emits are
handled.  Anything else decodes to a :class:`DecodeError`, which listings
carry as a ``.word`` pseudo-instruction.  Mnemonics follow unified syntax
for condition placement (``addseq``) and the classic stack aliases for
load/store multiple on ``sp`` (``stmfd``/``ldmfd``), so that CODESYS-style
listings (``stmfd sp!, {r11, r12, lr}``) read naturally.
"""
from __future__ import annotations

import enum
import re
import struct
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Iterable, Optional, Protocol, Union

__all__ = [
    "Reg", "WbReg", "Imm", "Shifted", "RegList", "Mem", "Target", "Psr",
    "Instr", "DecodeError", "DecodeFailure", "Unencodable",
    "decode", "decode_all", "encode", "assemble", "parse_instr",
    "format_listing_line", "Decoder", "CONDITIONS", "REG_NAMES",
]

CONDITIONS = ("eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc",
              "hi", "ls", "ge", "lt", "gt", "le", "")
COND_AL = 14
REG_NAMES = ("r0", "r1", "r2", "r3", "r4", "r5", "r6", "r7", "r8", "r9",
             "r10", "r11", "r12", "sp", "lr", "pc")
SP, LR, PC = 13, 14, 15

DP_OPS = ("and", "eor", "sub", "rsb", "add", "adc", "sbc", "rsc",
          "tst", "teq", "cmp", "cmn", "orr", "mov", "bic", "mvn")
COMPARE_OPS = frozenset(("tst", "teq", "cmp", "cmn"))
MOVE_OPS = frozenset(("mov", "mvn"))
SHIFT_NAMES = ("lsl", "lsr", "asr", "ror")
SHIFT_OPS = frozenset(SHIFT_NAMES + ("rrx",))

# (P, U) -> addressing mode
_LSM_MODES = {(0, 1): "ia", (1, 1): "ib", (0, 0): "da", (1, 0): "db"}
_LSM_BITS = {v: k for k, v in _LSM_MODES.items()}
_STACK_ALIAS = {
    "stm": {"db": "fd", "ia": "ea", "ib": "fa", "da": "ed"},
    "ldm": {"ia": "fd", "db": "ea", "da": "fa", "ib": "ed"},
}
_STACK_UNALIAS = {op: {v: k for k, v in m.items()} for op, m in _STACK_ALIAS.items()}

_REG_ALIASES = {"ip": 12, "fp": 11, "sb": 9, "sl": 10, "r13": 13, "r14": 14, "r15": 15}


def _ror(value: int, amount: int) -> int:
    amount &= 31
    return ((value >> amount) | (value << (32 - amount))) & 0xFFFFFFFF if amount else value


def _canonical_rotation(value: int) -> Optional[int]:
    """Smallest rotate field that expresses ``value`` as an A32 modified immediate."""
    for rot in range(16):
        if _ror(value, 32 - 2 * rot) <= 0xFF:
            return rot
    return None


def _fmt_num(value: int) -> str:
    if value < 0:
        return "-" + _fmt_num(-value)
    return str(value) if value <= 9 else hex(value)


# --------------------------------------------------------------------------
# operands


@dataclass(frozen=True)
class Reg:
    n: int

    def __str__(self) -> str:
        return REG_NAMES[self.n]


@dataclass(frozen=True)
class WbReg(Reg):
    """Base register with writeback (``sp!``) for load/store multiple."""

    def __str__(self) -> str:
        return REG_NAMES[self.n] + "!"


@dataclass(frozen=True)
class Imm:
    """Immediate.  ``rot`` is set only for non-canonical modified immediates."""
    value: int
    rot: Optional[int] = None

    def __str__(self) -> str:
        if self.rot is not None:
            imm8 = _ror(self.value, 32 - 2 * self.rot) & 0xFF
            return f"#{imm8}, #{2 * self.rot}"
        return "#" + _fmt_num(self.value)


@dataclass(frozen=True)
class Shifted:
    """Register with a shift; ``amount`` is an int or a :class:`Reg`."""
    reg: Reg
    kind: str
    amount: Union[int, Reg] = 0

    def __str__(self) -> str:
        if self.kind == "rrx":
            return f"{self.reg}, rrx"
        if isinstance(self.amount, Reg):
            return f"{self.reg}, {self.kind} {self.amount}"
        return f"{self.reg}, {self.kind} #{_fmt_num(self.amount)}"


@dataclass(frozen=True)
class RegList:
    regs: tuple
    user: bool = False

    def __str__(self) -> str:
        body = "{" + ", ".join(REG_NAMES[r] for r in self.regs) + "}"
        return body + (" ^" if self.user else "")


@dataclass(frozen=True)
class Mem:
    """Memory operand for single loads/stores.

    Exactly one of ``offset`` (immediate magnitude) and ``index`` is used;
    ``subtract`` carries the U bit so that ``#-0`` survives a round trip.
    """
    base: int
    offset: int = 0
    index: Optional[int] = None
    shift: str = "lsl"
    shift_amount: int = 0
    subtract: bool = False
    pre: bool = True
    writeback: bool = False

    def _offset_text(self) -> str:
        sign = "-" if self.subtract else ""
        if self.index is None:
            return f"#{sign}{_fmt_num(self.offset)}"
        text = f"{sign}{REG_NAMES[self.index]}"
        if self.shift == "rrx":
            text += ", rrx"
        elif not (self.shift == "lsl" and self.shift_amount == 0):
            text += f", {self.shift} #{_fmt_num(self.shift_amount)}"
        return text

    def __str__(self) -> str:
        base = REG_NAMES[self.base]
        if not self.pre:
            return f"[{base}], {self._offset_text()}"
        if self.index is None and self.offset == 0 and not self.subtract and not self.writeback:
            return f"[{base}]"
        return f"[{base}, {self._offset_text()}]" + ("!" if self.writeback else "")


@dataclass(frozen=True)
class Target:
    addr: int

    def __str__(self) -> str:
        return "#" + hex(self.addr)


@dataclass(frozen=True)
class Psr:
    spsr: bool = False
    mask: Optional[int] = None  # MSR field mask (bits f,s,x,c = 8,4,2,1)

    def __str__(self) -> str:
        name = "spsr" if self.spsr else "cpsr"
        if self.mask is None:
            return name
        fields = "".join(c for c, bit in (("f", 8), ("s", 4), ("x", 2), ("c", 1)) if self.mask & bit)
        return f"{name}_{fields}"


Operand = Union[Reg, Imm, Shifted, RegList, Mem, Target, Psr]


# --------------------------------------------------------------------------
# instruction records


@dataclass
class Instr:
    addr: int
    raw: int
    op: str
    operands: tuple = ()
    cond: int = COND_AL
    s: bool = False
    suffix: str = ""  # ldr/str size ("b", "h", "sb", "sh", "t", "bt") or ldm/stm mode
    literal_addr: Optional[int] = None
    literal: Optional[int] = None
    error: Optional["DecodeError"] = None

    @property
    def mnemonic(self) -> str:
        if self.error is not None:
            return ".word"
        cond = CONDITIONS[self.cond]
        if self.op in ("ldm", "stm"):
            mode = self.suffix
            base = self.operands[0]
            if isinstance(base, Reg) and base.n == SP:
                mode = _STACK_ALIAS[self.op][mode]
            return self.op + mode + cond
        if self.op in ("ldr", "str"):
            return self.op + self.suffix + cond
        if self.op in COMPARE_OPS:
            return self.op + cond
        return self.op + ("s" if self.s else "") + cond

    @property
    def op_str(self) -> str:
        if self.error is not None:
            return hex(self.raw)
        return ", ".join(str(o) for o in self.operands)

    @property
    def text(self) -> str:
        ops = self.op_str
        return f"{self.mnemonic} {ops}" if ops else self.mnemonic

    @property
    def is_branch(self) -> bool:
        if self.error is not None:
            return False
        if self.op in ("b", "bl", "bx"):
            return True
        return self.writes_pc

    @property
    def branch_target(self) -> Optional[int]:
        if self.op in ("b", "bl") and self.error is None:
            return self.operands[0].addr
        return None

    @property
    def writes_pc(self) -> bool:
        if self.error is not None:
            return False
        if self.op in DP_OPS and self.op not in COMPARE_OPS or self.op in SHIFT_OPS:
            return self.operands[0] == Reg(PC)
        if self.op == "ldr" and self.operands[0] == Reg(PC):
            return True
        if self.op == "ldm":
            return PC in self.operands[1].regs
        return False

    def __str__(self) -> str:
        return self.text


class DecodeFailure(enum.Enum):
    UnsupportedClass = "UnsupportedClass"
    UndefinedEncoding = "UndefinedEncoding"


@dataclass(frozen=True)
class DecodeError:
    addr: int
    raw: int
    reason: DecodeFailure

    def as_instr(self) -> Instr:
        return Instr(addr=self.addr, raw=self.raw, op=".word", error=self)


class Unencodable(ValueError):
    """Raised when an instruction cannot be expressed in A32 encoding."""


class Decoder(Protocol):
    """Pluggable decoding backend."""

    def __call__(self, raw: int, addr: int) -> Union[Instr, DecodeError]: ...


# --------------------------------------------------------------------------
# decoding


def decode(raw: int, addr: int = 0) -> Union[Instr, DecodeError]:
    """Decode one little-endian A32 word located at file offset ``addr``."""
    raw &= 0xFFFFFFFF
    cond = raw >> 28
    if cond == 0xF:
        return DecodeError(addr, raw, DecodeFailure.UnsupportedClass)
    try:
        instr = _decode(raw, addr, cond)
    except _Reject as exc:
        return DecodeError(addr, raw, exc.reason)
    return instr


class _Reject(Exception):
    def __init__(self, reason: DecodeFailure):
        self.reason = reason


def _unsupported():
    return _Reject(DecodeFailure.UnsupportedClass)


def _undefined():
    return _Reject(DecodeFailure.UndefinedEncoding)


def _decode(w: int, addr: int, cond: int) -> Instr:
    cls = (w >> 25) & 7
    if cls == 0:
        if (w & 0x0FC000F0) == 0x00000090:
            return _decode_mul(w, addr, cond)
        if (w & 0x90) == 0x90:
            if (w & 0x60) == 0:
                raise _unsupported()  # long multiply, swap, exclusives
            return _decode_extra_ldst(w, addr, cond)
        if (w & 0x01900000) == 0x01000000:
            return _decode_misc(w, addr, cond)
        return _decode_dp(w, addr, cond)
    if cls == 1:
        if (w & 0x01900000) == 0x01000000:
            if (w & 0x0FB0F000) == 0x0320F000 and (w >> 16) & 0xF:
                mask = (w >> 16) & 0xF
                rot = (w >> 8) & 0xF
                value = _ror(w & 0xFF, 2 * rot)
                canon = _canonical_rotation(value)
                imm = Imm(value, None if canon == rot else rot)
                return Instr(addr, w, "msr", (Psr(bool(w & (1 << 22)), mask), imm), cond)
            raise _unsupported()
        return _decode_dp(w, addr, cond)
    if cls == 2:
        return _decode_ldst(w, addr, cond)
    if cls == 3:
        if w & 0x10:
            raise _unsupported()
        return _decode_ldst(w, addr, cond)
    if cls == 4:
        return _decode_ldm(w, addr, cond)
    if cls == 5:
        off = w & 0x00FFFFFF
        if off & 0x00800000:
            off -= 1 << 24
        target = (addr + 8 + (off << 2)) & 0xFFFFFFFF
        op = "bl" if w & (1 << 24) else "b"
        return Instr(addr, w, op, (Target(target),), cond)
    if (w & 0x0F000000) == 0x0F000000:
        return Instr(addr, w, "swi", (Imm(w & 0x00FFFFFF),), cond)
    raise _unsupported()


def _decode_shifter_reg(w: int) -> Union[Reg, Shifted]:
    rm = Reg(w & 0xF)
    kind = SHIFT_NAMES[(w >> 5) & 3]
    if w & 0x10:
        if w & 0x80:
            raise _undefined()
        return Shifted(rm, kind, Reg((w >> 8) & 0xF))
    amount = (w >> 7) & 0x1F
    if amount == 0:
        if kind == "lsl":
            return rm
        if kind == "ror":
            return Shifted(rm, "rrx")
        amount = 32
    return Shifted(rm, kind, amount)


def _decode_dp(w: int, addr: int, cond: int) -> Instr:
    op = DP_OPS[(w >> 21) & 0xF]
    s = bool(w & (1 << 20))
    rn = (w >> 16) & 0xF
    rd = (w >> 12) & 0xF
    if w & (1 << 25):
        rot = (w >> 8) & 0xF
        value = _ror(w & 0xFF, 2 * rot)
        canon = _canonical_rotation(value)
        op2 = Imm(value, None if canon == rot else rot)
    else:
        op2 = _decode_shifter_reg(w)
    if op in COMPARE_OPS:
        if rd != 0:
            raise _undefined()
        return Instr(addr, w, op, (Reg(rn), op2), cond, s=True)
    if op in MOVE_OPS:
        if rn != 0:
            raise _undefined()
        if op == "mov" and isinstance(op2, Shifted):
            amount = op2.amount
            if op2.kind == "rrx":
                return Instr(addr, w, "rrx", (Reg(rd), op2.reg), cond, s=s)
            return Instr(addr, w, op2.kind, (Reg(rd), op2.reg, amount if isinstance(amount, Reg) else Imm(amount)), cond, s=s)
        if op == "mov" and not s and rd == 0 and op2 == Reg(0):
            return Instr(addr, w, "nop", (), cond)
        return Instr(addr, w, op, (Reg(rd), op2), cond, s=s)
    return Instr(addr, w, op, (Reg(rd), Reg(rn), op2), cond, s=s)


def _decode_mul(w: int, addr: int, cond: int) -> Instr:
    accumulate = bool(w & (1 << 21))
    s = bool(w & (1 << 20))
    rd = (w >> 16) & 0xF
    rn = (w >> 12) & 0xF
    rs = (w >> 8) & 0xF
    rm = w & 0xF
    if accumulate:
        return Instr(addr, w, "mla", (Reg(rd), Reg(rm), Reg(rs), Reg(rn)), cond, s=s)
    if rn != 0:
        raise _undefined()
    return Instr(addr, w, "mul", (Reg(rd), Reg(rm), Reg(rs)), cond, s=s)


def _decode_misc(w: int, addr: int, cond: int) -> Instr:
    if (w & 0x0FBF0FFF) == 0x010F0000:
        return Instr(addr, w, "mrs", (Reg((w >> 12) & 0xF), Psr(bool(w & (1 << 22)))), cond)
    if (w & 0x0FB0FFF0) == 0x0120F000 and (w >> 16) & 0xF:
        return Instr(addr, w, "msr", (Psr(bool(w & (1 << 22)), (w >> 16) & 0xF), Reg(w & 0xF)), cond)
    if (w & 0x0FFFFFF0) == 0x012FFF10:
        return Instr(addr, w, "bx", (Reg(w & 0xF),), cond)
    raise _unsupported()


def _decode_ldst(w: int, addr: int, cond: int) -> Instr:
    pre = bool(w & (1 << 24))
    up = bool(w & (1 << 23))
    byte = bool(w & (1 << 22))
    wb = bool(w & (1 << 21))
    load = bool(w & (1 << 20))
    rn = (w >> 16) & 0xF
    rt = (w >> 12) & 0xF
    suffix = "b" if byte else ""
    if not pre and wb:
        suffix += "t"
    if w & (1 << 25):
        shift = _decode_shifter_reg(w)
        if isinstance(shift, Reg):
            mem = Mem(rn, index=shift.n, subtract=not up, pre=pre, writeback=wb and pre)
        else:
            amount = 0 if shift.kind == "rrx" else shift.amount
            mem = Mem(rn, index=shift.reg.n, shift=shift.kind, shift_amount=amount,
                      subtract=not up, pre=pre, writeback=wb and pre)
    else:
        mem = Mem(rn, offset=w & 0xFFF, subtract=not up, pre=pre, writeback=wb and pre)
    instr = Instr(addr, w, "ldr" if load else "str", (Reg(rt), mem), cond, suffix=suffix)
    if load and rn == PC and pre and not wb and mem.index is None:
        instr.literal_addr = addr + 8 + (-mem.offset if mem.subtract else mem.offset)
    return instr


def _decode_extra_ldst(w: int, addr: int, cond: int) -> Instr:
    pre = bool(w & (1 << 24))
    up = bool(w & (1 << 23))
    imm_form = bool(w & (1 << 22))
    wb = bool(w & (1 << 21))
    load = bool(w & (1 << 20))
    sh = (w >> 5) & 3
    rn = (w >> 16) & 0xF
    rt = (w >> 12) & 0xF
    if not pre and wb:
        raise _unsupported()
    if sh == 1:
        suffix = "h"
    elif load:
        suffix = "sb" if sh == 2 else "sh"
    else:
        raise _unsupported()  # ldrd/strd
    if imm_form:
        mem = Mem(rn, offset=((w >> 4) & 0xF0) | (w & 0xF), subtract=not up, pre=pre, writeback=wb)
    else:
        if (w >> 8) & 0xF:
            raise _undefined()
        mem = Mem(rn, index=w & 0xF, subtract=not up, pre=pre, writeback=wb)
    instr = Instr(addr, w, "ldr" if load else "str", (Reg(rt), mem), cond, suffix=suffix)
    if load and rn == PC and pre and not wb and imm_form:
        instr.literal_addr = addr + 8 + (-mem.offset if mem.subtract else mem.offset)
    return instr


def _decode_ldm(w: int, addr: int, cond: int) -> Instr:
    regs = tuple(i for i in range(16) if w & (1 << i))
    if not regs:
        raise _undefined()
    mode = _LSM_MODES[((w >> 24) & 1, (w >> 23) & 1)]
    user = bool(w & (1 << 22))
    rn = (w >> 16) & 0xF
    base = WbReg(rn) if w & (1 << 21) else Reg(rn)
    op = "ldm" if w & (1 << 20) else "stm"
    return Instr(addr, w, op, (base, RegList(regs, user)), cond, suffix=mode)


# --------------------------------------------------------------------------
# encoding


def _reg(o) -> int:
    if not isinstance(o, Reg):
        raise Unencodable(f"expected register, got {o!r}")
    return o.n


def _encode_imm(imm: Imm) -> int:
    value = imm.value & 0xFFFFFFFF
    rot = imm.rot if imm.rot is not None else _canonical_rotation(value)
    if rot is None:
        raise Unencodable(f"immediate {imm.value:#x} is not a modified immediate")
    imm8 = _ror(value, 32 - 2 * rot)
    if imm8 > 0xFF:
        raise Unencodable(f"immediate {imm.value:#x} not expressible with rotation {rot}")
    return (rot << 8) | imm8


def _encode_shift(reg: int, kind: str, amount) -> int:
    if kind == "rrx":
        return (3 << 5) | reg
    k = SHIFT_NAMES.index(kind)
    if isinstance(amount, Reg):
        return (amount.n << 8) | (k << 5) | 0x10 | reg
    if kind == "lsl":
        if not 0 <= amount <= 31:
            raise Unencodable(f"lsl #{amount}")
    elif kind in ("lsr", "asr"):
        if not 1 <= amount <= 32:
            raise Unencodable(f"{kind} #{amount}")
        amount &= 31
    elif not 1 <= amount <= 31:
        raise Unencodable(f"ror #{amount}")
    return (amount << 7) | (k << 5) | reg


def _encode_op2(o) -> int:
    if isinstance(o, Imm):
        return (1 << 25) | _encode_imm(o)
    if isinstance(o, Shifted):
        return _encode_shift(o.reg.n, o.kind, o.amount)
    return _reg(o)


def encode(instr: Instr) -> int:
    """Inverse of :func:`decode` for the supported subset."""
    if instr.error is not None:
        return instr.raw
    cond = instr.cond << 28
    op, ops = instr.op, instr.operands
    s = (1 << 20) if instr.s else 0
    if op == "nop":
        return cond | 0x01A00000
    if op in COMPARE_OPS:
        return cond | (DP_OPS.index(op) << 21) | (1 << 20) | (_reg(ops[0]) << 16) | _encode_op2(ops[1])
    if op in MOVE_OPS:
        return cond | (DP_OPS.index(op) << 21) | s | (_reg(ops[0]) << 12) | _encode_op2(ops[1])
    if op in SHIFT_OPS:
        rd, rm = _reg(ops[0]), _reg(ops[1])
        if op == "rrx":
            shift = _encode_shift(rm, "rrx", 0)
        else:
            amount = ops[2] if isinstance(ops[2], Reg) else ops[2].value
            if op == "lsl" and amount == 0:
                raise Unencodable("lsl #0 is mov")
            shift = _encode_shift(rm, op, amount)
        return cond | (13 << 21) | s | (rd << 12) | shift
    if op in DP_OPS:
        return (cond | (DP_OPS.index(op) << 21) | s | (_reg(ops[1]) << 16)
                | (_reg(ops[0]) << 12) | _encode_op2(ops[2]))
    if op == "mul":
        return cond | s | (_reg(ops[0]) << 16) | (_reg(ops[2]) << 8) | 0x90 | _reg(ops[1])
    if op == "mla":
        return (cond | (1 << 21) | s | (_reg(ops[0]) << 16) | (_reg(ops[3]) << 12)
                | (_reg(ops[2]) << 8) | 0x90 | _reg(ops[1]))
    if op in ("ldr", "str"):
        return cond | _encode_ldst(instr)
    if op in ("ldm", "stm"):
        base, rl = ops
        p, u = _LSM_BITS[instr.suffix]
        if not rl.regs:
            raise Unencodable("empty register list")
        bits = sum(1 << r for r in rl.regs)
        wb = isinstance(base, WbReg)
        return (cond | (4 << 25) | (p << 24) | (u << 23) | (int(rl.user) << 22) | (int(wb) << 21)
                | ((op == "ldm") << 20) | (base.n << 16) | bits)
    if op in ("b", "bl"):
        delta = (ops[0].addr - (instr.addr + 8)) & 0xFFFFFFFF
        if delta & 0x80000000:
            delta -= 1 << 32
        if delta & 3 or not -(1 << 25) <= delta < (1 << 25):
            raise Unencodable(f"branch offset {delta:#x} out of range")
        return cond | (5 << 25) | ((op == "bl") << 24) | ((delta >> 2) & 0x00FFFFFF)
    if op == "bx":
        return cond | 0x012FFF10 | _reg(ops[0])
    if op == "swi":
        if not 0 <= ops[0].value <= 0xFFFFFF:
            raise Unencodable("swi immediate out of range")
        return cond | 0x0F000000 | ops[0].value
    if op == "mrs":
        return cond | 0x010F0000 | (int(ops[1].spsr) << 22) | (_reg(ops[0]) << 12)
    if op == "msr":
        psr = ops[0]
        if not psr.mask:
            raise Unencodable("msr needs a field mask")
        head = cond | (int(psr.spsr) << 22) | (psr.mask << 16) | 0x0120F000
        if isinstance(ops[1], Imm):
            return head | (1 << 25) | _encode_imm(ops[1])
        return head | _reg(ops[1])
    raise Unencodable(f"unknown operation {op!r}")


def _encode_ldst(instr: Instr) -> int:
    rt = _reg(instr.operands[0])
    mem: Mem = instr.operands[1]
    load = instr.op == "ldr"
    suffix = instr.suffix
    u = 0 if mem.subtract else 1
    if suffix in ("h", "sb", "sh"):
        sh = {"h": 1, "sb": 2, "sh": 3}[suffix]
        if not load and sh != 1:
            raise Unencodable("str supports only the h size")
        if not mem.pre and mem.writeback:
            raise Unencodable("post-indexed writeback is implicit")
        w = (int(mem.pre) << 24) | (u << 23) | (int(mem.writeback) << 21) | (int(load) << 20)
        w |= (mem.base << 16) | (rt << 12) | 0x90 | (sh << 5)
        if mem.index is None:
            if not 0 <= mem.offset <= 0xFF:
                raise Unencodable(f"halfword offset {mem.offset:#x} out of range")
            return w | (1 << 22) | ((mem.offset & 0xF0) << 4) | (mem.offset & 0xF)
        if mem.shift != "lsl" or mem.shift_amount:
            raise Unencodable("halfword transfers take no shift")
        return w | mem.index
    byte = suffix in ("b", "bt")
    translate = suffix in ("t", "bt")
    if translate and mem.pre:
        raise Unencodable("translated transfers are post-indexed")
    wb = translate or (mem.pre and mem.writeback)
    w = (2 << 25) | (int(mem.pre) << 24) | (u << 23) | (int(byte) << 22) | (int(wb) << 21) | (int(load) << 20)
    w |= (mem.base << 16) | (rt << 12)
    if mem.index is None:
        if not 0 <= mem.offset <= 0xFFF:
            raise Unencodable(f"offset {mem.offset:#x} out of range")
        return w | mem.offset
    amount = mem.shift_amount
    if mem.shift == "lsl" and amount == 0:
        shift = mem.index
    else:
        shift = _encode_shift(mem.index, mem.shift, amount)
    return w | (1 << 25) | shift


# --------------------------------------------------------------------------
# text parsing (assembler for the canonical syntax)


def _build_mnemonic_table() -> dict:
    table: dict = {}

    def add(text, entry):
        if text in table and table[text] != entry:
            raise AssertionError(f"ambiguous mnemonic {text}")
        table[text] = entry

    for ci, c in enumerate(CONDITIONS):
        for op in DP_OPS:
            if op in COMPARE_OPS:
                add(op + c, (op, True, "", ci))
            else:
                add(op + c, (op, False, "", ci))
                add(op + "s" + c, (op, True, "", ci))
        for op in SHIFT_OPS:
            add(op + c, (op, False, "", ci))
            add(op + "s" + c, (op, True, "", ci))
        for op in ("mul", "mla"):
            add(op + c, (op, False, "", ci))
            add(op + "s" + c, (op, True, "", ci))
        for size in ("", "b", "t", "bt", "h"):
            add("ldr" + size + c, ("ldr", False, size, ci))
            add("str" + size + c, ("str", False, size, ci))
        for size in ("sb", "sh"):
            add("ldr" + size + c, ("ldr", False, size, ci))
        for op in ("ldm", "stm"):
            for mode in ("ia", "ib", "da", "db"):
                add(op + mode + c, (op, False, mode, ci))
            for alias in ("fd", "fa", "ed", "ea"):
                add(op + alias + c, (op, False, "@" + alias, ci))
            add(op + c, (op, False, "ia", ci))
        for op in ("b", "bl", "bx", "swi", "mrs", "msr", "nop"):
            add(op + c, (op, False, "", ci))
        add("svc" + c, ("swi", False, "", ci))
        add("push" + c, ("push", False, "", ci))
        add("pop" + c, ("pop", False, "", ci))
    for alias, canon in (("hs", "cs"), ("lo", "cc")):
        ci = CONDITIONS.index(canon)
        for text, entry in list(table.items()):
            if entry[3] == ci and text.endswith(canon):
                add(text[: -len(canon)] + alias, entry)
    return table


_MNEMONICS = _build_mnemonic_table()


def _split_operands(text: str) -> list:
    parts, depth, cur = [], 0, []
    for ch in text:
        if ch in "[{":
            depth += 1
        elif ch in "]}":
            depth -= 1
        if ch == "," and depth == 0:
            parts.append("".join(cur).strip())
            cur = []
        else:
            cur.append(ch)
    tail = "".join(cur).strip()
    if tail:
        parts.append(tail)
    return parts


def _parse_reg(tok: str) -> int:
    tok = tok.strip().lower()
    if tok in REG_NAMES:
        return REG_NAMES.index(tok)
    if tok in _REG_ALIASES:
        return _REG_ALIASES[tok]
    raise ValueError(f"not a register: {tok!r}")


def _parse_int(tok: str) -> int:
    tok = tok.strip()
    if tok.startswith("#"):
        tok = tok[1:].strip()
    return int(tok, 0)


_SHIFT_RE = re.compile(r"^(lsl|lsr|asr|ror)\s+(\S+)$|^rrx$")


def _parse_shift(text: str):
    text = text.strip().lower()
    if text == "rrx":
        return "rrx", 0
    m = _SHIFT_RE.match(text)
    if not m:
        raise ValueError(f"bad shift: {text!r}")
    amount = m.group(2)
    if amount.startswith("#"):
        return m.group(1), _parse_int(amount)
    return m.group(1), Reg(_parse_reg(amount))


def _parse_mem(text: str, rest: list) -> Mem:
    text = text.strip()
    wb = text.endswith("!")
    if wb:
        text = text[:-1].strip()
    if not (text.startswith("[") and text.endswith("]")):
        raise ValueError(f"bad memory operand {text!r}")
    inner = _split_operands(text[1:-1])
    base = _parse_reg(inner[0])
    pre = bool(len(inner) > 1 or not rest)
    offset_parts = inner[1:] if len(inner) > 1 else rest
    mem = Mem(base, pre=pre, writeback=wb)
    if not offset_parts:
        return mem
    tok = offset_parts[0].strip()
    if tok.startswith("#"):
        val = tok[1:].strip()
        neg = val.startswith("-")
        mag = _parse_int(val.lstrip("-"))
        return replace(mem, offset=mag, subtract=neg)
    neg = tok.startswith("-")
    tok = tok.lstrip("+-")
    mem = replace(mem, index=_parse_reg(tok), subtract=neg)
    if len(offset_parts) > 1:
        kind, amount = _parse_shift(offset_parts[1])
        if kind == "rrx":
            amount = 0
        mem = replace(mem, shift=kind, shift_amount=amount)
    return mem


def _parse_reglist(text: str) -> RegList:
    text = text.strip()
    user = text.endswith("^")
    if user:
        text = text[:-1].strip()
    regs = set()
    for part in text.strip("{}").split(","):
        part = part.strip()
        if not part:
            continue
        if "-" in part:
            lo, hi = (_parse_reg(p) for p in part.split("-"))
            regs.update(range(lo, hi + 1))
        else:
            regs.add(_parse_reg(part))
    return RegList(tuple(sorted(regs)), user)


def _parse_psr(tok: str) -> Psr:
    tok = tok.strip().lower()
    names = {"apsr_nzcvq": ("cpsr", 8), "apsr_g": ("cpsr", 4), "apsr_nzcvqg": ("cpsr", 12)}
    if tok in names:
        return Psr(False, names[tok][1])
    if tok == "apsr":
        return Psr(False)
    name, _, fields = tok.partition("_")
    if name not in ("cpsr", "spsr"):
        raise ValueError(f"bad status register {tok!r}")
    if not _:
        return Psr(name == "spsr")
    mask = 0
    for ch in fields:
        mask |= {"f": 8, "s": 4, "x": 2, "c": 1}[ch]
    return Psr(name == "spsr", mask)


def _parse_op2(parts: list):
    tok = parts[0].strip()
    if tok.startswith("#"):
        value = _parse_int(tok) & 0xFFFFFFFF
        if len(parts) > 1:
            rot_amount = _parse_int(parts[1])
            if rot_amount % 2 or not 0 <= rot_amount <= 30:
                raise Unencodable(f"bad rotation #{rot_amount}")
            value = _ror(value, rot_amount)
            rot = rot_amount // 2
            return Imm(value, None if _canonical_rotation(value) == rot else rot)
        return Imm(value)
    reg = Reg(_parse_reg(tok))
    if len(parts) > 1:
        kind, amount = _parse_shift(parts[1])
        if kind == "lsl" and amount == 0:
            return reg
        return Shifted(reg, kind, amount)
    return reg


def parse_instr(text: str, addr: int = 0) -> Instr:
    """Parse canonical assembly text into an :class:`Instr` (``raw`` filled in)."""
    text = text.split(";", 1)[0].strip()
    head, _, rest = text.partition(" ")
    head = head.lower()
    if head not in _MNEMONICS:
        raise ValueError(f"unknown mnemonic {head!r}")
    op, s, suffix, cond = _MNEMONICS[head]
    parts = _split_operands(rest)
    if op in ("push", "pop"):
        regs = _parse_reglist(parts[0])
        op, suffix = ("stm", "db") if op == "push" else ("ldm", "ia")
        ops = (WbReg(SP), regs)
    elif op == "nop":
        ops = ()
    elif op in COMPARE_OPS:
        ops = (Reg(_parse_reg(parts[0])), _parse_op2(parts[1:]))
    elif op in MOVE_OPS:
        ops = (Reg(_parse_reg(parts[0])), _parse_op2(parts[1:]))
        if op == "mov" and isinstance(ops[1], Shifted):
            sh = ops[1]
            if sh.kind == "rrx":
                op, ops = "rrx", (ops[0], sh.reg)
            else:
                amount = sh.amount if isinstance(sh.amount, Reg) else Imm(sh.amount)
                op, ops = sh.kind, (ops[0], sh.reg, amount)
    elif op in SHIFT_OPS:
        if op == "rrx":
            ops = (Reg(_parse_reg(parts[0])), Reg(_parse_reg(parts[1])))
        else:
            amount = parts[2].strip()
            amount_op = Imm(_parse_int(amount)) if amount.startswith("#") else Reg(_parse_reg(amount))
            ops = (Reg(_parse_reg(parts[0])), Reg(_parse_reg(parts[1])), amount_op)
    elif op in DP_OPS:
        ops = (Reg(_parse_reg(parts[0])), Reg(_parse_reg(parts[1])), _parse_op2(parts[2:]))
    elif op in ("mul", "mla"):
        ops = tuple(Reg(_parse_reg(p)) for p in parts)
    elif op in ("ldr", "str"):
        ops = (Reg(_parse_reg(parts[0])), _parse_mem(parts[1], parts[2:]))
    elif op in ("ldm", "stm"):
        base_tok = parts[0].strip()
        wb = base_tok.endswith("!")
        base = _parse_reg(base_tok.rstrip("!"))
        if suffix.startswith("@"):
            suffix = _STACK_UNALIAS[op][suffix[1:]]
        ops = (WbReg(base) if wb else Reg(base), _parse_reglist(",".join(parts[1:])))
    elif op in ("b", "bl"):
        ops = (Target(_parse_int(parts[0])),)
    elif op == "bx":
        ops = (Reg(_parse_reg(parts[0])),)
    elif op == "swi":
        ops = (Imm(_parse_int(parts[0])),)
    elif op == "mrs":
        ops = (Reg(_parse_reg(parts[0])), _parse_psr(parts[1]))
    elif op == "msr":
        src = parts[1].strip()
        ops = (_parse_psr(parts[0]), _parse_op2(parts[1:]) if src.startswith("#") else Reg(_parse_reg(src)))
    else:  # pragma: no cover - table and branches are kept in sync
        raise ValueError(head)
    if op == "ldr" and ops[1].pre and suffix in ("t", "bt"):
        raise Unencodable("translated transfers are post-indexed")
    instr = Instr(addr, 0, op, ops, cond, s=s, suffix=suffix)
    instr.raw = encode(instr)
    return instr


@lru_cache(maxsize=65536)
def _assemble_cached(text: str, addr: int) -> int:
    return parse_instr(text, addr).raw


def assemble(text: str, addr: int = 0) -> int:
    """Assemble one line of canonical syntax to its 32-bit encoding."""
    return _assemble_cached(text, addr)


# --------------------------------------------------------------------------
# subroutine-level helpers


def decode_all(sub, data: Optional[bytes] = None, decoder: Decoder = decode) -> list:
    """Decode a carved subroutine's code words (its literal pool excluded).

    PC-relative loads whose literal lies in the subroutine's pool get the
    literal value attached.  ``data`` defaults to ``sub.body + pool``.
    """
    body = sub.body
    start = sub.start
    pool_start, pool_end = sub.end, sub.pool_end
    pool = sub.pool_bytes if data is None else data[pool_start:pool_end]
    out = []
    if len(body) % 4:
        raise ValueError("subroutine body is not word aligned")
    words = struct.unpack(f"<{len(body) // 4}I", body)
    for i, raw in enumerate(words):
        addr = start + 4 * i
        res = decoder(raw, addr)
        if isinstance(res, DecodeError):
            res = res.as_instr()
        elif res.literal_addr is not None and pool_start <= res.literal_addr <= pool_end - _width(res):
            off = res.literal_addr - pool_start
            res.literal = int.from_bytes(pool[off:off + _width(res)], "little")
        out.append(res)
    return out


def _width(instr: Instr) -> int:
    return {"b": 1, "h": 2, "sb": 1, "sh": 2}.get(instr.suffix, 4)


def format_listing_line(instr: Instr) -> str:
    """``<hex addr>: <hex word>  <mnemonic> <operands>`` listing line."""
    line = f"{instr.addr:#010x}: {instr.raw:08x}  {instr.text}"
    if instr.literal is not None:
        line += f"  ; ={instr.literal:#x}"
    return line


def iter_words(data: bytes, start: int, end: int) -> Iterable[tuple]:
    for off in range(start, end, 4):
        yield off, int.from_bytes(data[off:off + 4], "little")
