"""Ground-truth PRG generator.

The forge is a mock code generator: it lays out header, subroutines, literal
pools, call table construction and symbol table directly, and records every
fact an analyzer should recover in a :class:`Manifest`.  It deliberately
keeps its own copy of the format constants instead of importing them from
:mod:`plcrev.binfmt`, so a layout bug on one side cannot confirm itself on
the other.
"""
from __future__ import annotations

import hashlib
import json
import logging
import random
import re
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional

from .armdec import assemble
from .errors import PlcrevError

log = logging.getLogger(__name__)

# --- format constants, kept independent of binfmt --------------------------
HDR_LEN = 80
BIAS = 0x18
OFF_LAST_STRING, OFF_ENTRY, OFF_CODE_END, OFF_STACK, OFF_DYNLIB = 0x04, 0x20, 0x2C, 0x30, 0x44
PRO_WORDS = (0xE1A0C00D, 0xE92D5800, 0xE1A0B00C)
EPI_WORD = 0xE91BA800

# --- address plan -----------------------------------------------------------
GLOBALS_BASE = 0x00800000
INSTANCE_BASE = 0x00900000
FB_DATA_BASE = 0x00A00000
LIB_DATA_BASE = 0x00C00000
TABLE_MIN, TABLE_MAX = 0x01000000, 0x0F000000
FLAG_BASE = 0x00B00000

WAGO_INPUT = (0x28CFEC00, 0x28CFF7F8)
WAGO_OUTPUT = (0x28CFD800, 0x28CFE3F8)

MAX_BODY = 800  # instructions per subroutine, keeps literal pools in ldr reach
WORK_REGS = tuple(range(1, 9))
BASE_REG = 9

COND_SUFFIXES = ("", "eq", "ne", "cs", "cc", "mi", "pl", "vs", "vc", "hi", "ls", "ge", "lt", "gt", "le")

FIXED = ("GLOBAL_INIT", "SUB_1", "SUB_2", "SUB_3", "SYSDEBUG")


class SpecInfeasible(PlcrevError):
    pass


class SelfCheckFailed(PlcrevError):
    pass


# --------------------------------------------------------------------------
# body items
#
# ("i", text)                 one instruction
# ("w", word)                 one pre-encoded instruction word
# ("lit", reg, value, tag)    ldr reg, =value (tag names the literal in the manifest)
# ("label", name)
# ("b", cond, label)          forward branch
# ("call", callee, reg)       nine-word static dispatch through the callee's slot
# ("dyn", symbol, reg)        nine-word dispatch through a symbol jump offset
# ("mark", key)               records the address of the next instruction


def _item_words(item) -> int:
    kind = item[0]
    if kind in ("label", "mark"):
        return 0
    if kind in ("call", "dyn"):
        return 9
    return 1


def body_words(items) -> int:
    return sum(_item_words(it) for it in items)


_REG_RE = re.compile(r"\br(\d+)\b")


def rename_items(items, perm: dict) -> list:
    """Apply a register permutation to every instruction of a body."""
    sub = lambda m: f"r{perm.get(int(m.group(1)), int(m.group(1)))}"  # noqa: E731
    out = []
    for it in items:
        kind = it[0]
        if kind == "i":
            out.append(("i", _REG_RE.sub(sub, it[1])))
        elif kind == "lit":
            out.append(("lit", perm.get(it[1], it[1])) + tuple(it[2:]))
        elif kind in ("call", "dyn"):
            out.append((kind, it[1], perm.get(it[2], it[2])))
        else:
            out.append(it)
    return out


def _imm(rng: random.Random) -> int:
    if rng.random() < 0.7:
        return rng.randrange(256)
    return rng.randrange(1, 256) << (2 * rng.randrange(1, 12))


def _cond(rng: random.Random, p: float = 0.3) -> str:
    return rng.choice(COND_SUFFIXES[1:]) if rng.random() < p else ""


def _r(rng, regs=WORK_REGS) -> str:
    return f"r{rng.choice(regs)}"


def _dp(rng: random.Random) -> str:
    op = rng.choice(("add", "sub", "rsb", "and", "orr", "eor", "bic", "adc", "sbc"))
    s = "s" if rng.random() < 0.25 else ""
    head = op + s + _cond(rng)
    form = rng.randrange(3)
    if form == 0:
        return f"{head} {_r(rng)}, {_r(rng)}, #{_imm(rng)}"
    if form == 1:
        return f"{head} {_r(rng)}, {_r(rng)}, {_r(rng)}"
    return f"{head} {_r(rng)}, {_r(rng)}, {_r(rng)}, {rng.choice(('lsl', 'lsr', 'asr', 'ror'))} #{rng.randrange(1, 32)}"


def _idiom(rng: random.Random, base: int = BASE_REG, reads_instance: bool = False) -> list:
    """A short, always-terminating instruction group."""
    b = f"r{base}"
    kind = rng.randrange(9 if reads_instance else 8)
    if kind == 0:
        return [("i", _dp(rng)) for _ in range(rng.randint(1, 4))]
    if kind == 1:
        o1, o2 = 4 * rng.randrange(256), 4 * rng.randrange(256)
        r = _r(rng)
        return [("i", f"ldr {r}, [{b}, #{o1}]"), ("i", f"{rng.choice(('add', 'sub', 'eor'))} {r}, {r}, #{_imm(rng)}"),
                ("i", f"str {r}, [{b}, #{o2}]")]
    if kind == 2:
        label = f"L{rng.getrandbits(40):x}"
        cmp = rng.choice(("cmp", "cmn", "tst", "teq"))
        body = [("i", f"{cmp} {_r(rng)}, #{_imm(rng)}"),
                ("b", rng.choice(COND_SUFFIXES[1:]), label)]
        body += [("i", _dp(rng)) for _ in range(rng.randint(1, 3))]
        return body + [("label", label)]
    if kind == 3:
        rd, rm, rs, rn = (_r(rng) for _ in range(4))
        if rng.random() < 0.5:
            return [("i", f"mul{_cond(rng)} {rd}, {rm}, {rs}")]
        return [("i", f"mla {rd}, {rm}, {rs}, {rn}")]
    if kind == 4:
        op = rng.choice(("ldrb", "strb", "ldrh", "strh", "ldrsb", "ldrsh"))
        # halfword and signed forms only have an 8-bit offset
        off = rng.randrange(4096) if op in ("ldrb", "strb") else rng.randrange(128) * (2 if op.endswith("h") else 1)
        return [("i", f"{op} {_r(rng)}, [{b}, #{off}]")]
    if kind == 5:
        sh = rng.choice(("lsl", "lsr", "asr", "ror"))
        r = _r(rng)
        return [("i", f"{sh}{'s' if rng.random() < 0.3 else ''} {r}, {_r(rng)}, #{rng.randrange(1, 32)}"),
                ("i", f"mov{_cond(rng)} {_r(rng)}, {r}")]
    if kind == 6:
        regs = sorted(rng.sample(WORK_REGS, rng.randint(1, 4)))
        mode = rng.choice(("ia", "ib", "da", "db"))
        lst = ", ".join(f"r{x}" for x in regs)
        bump = 4 * rng.randrange(16, 64)
        return [("i", f"add {b}, {b}, #{bump}"),
                ("i", f"stm{mode} {b}, {{{lst}}}"), ("i", f"ldm{mode} {b}, {{{lst}}}"),
                ("i", f"sub {b}, {b}, #{bump}")]
    if kind == 7:
        r = _r(rng)
        return [("i", f"mvn{_cond(rng)} {r}, {_r(rng)}"), ("i", f"cmp {r}, {_r(rng)}"),
                ("i", f"mov{rng.choice(COND_SUFFIXES[1:])} {_r(rng)}, #{_imm(rng)}")]
    r = _r(rng)
    return [("i", f"ldr {r}, [r0, #{4 * rng.randrange(12)}]"), ("i", f"str {r}, [{b}, #{4 * rng.randrange(64)}]")]


def random_body(rng: random.Random, n_idioms: int, data_base: int, reads_instance: bool = False) -> list:
    items = [("lit", BASE_REG, data_base, None)]
    for _ in range(n_idioms):
        items += _idiom(rng, BASE_REG, reads_instance)
    return items


def filler_body(rng: random.Random, target_words: int, data_base: int) -> list:
    items = [("lit", BASE_REG, data_base, None)]
    words = 1
    while words < target_words:
        more = _idiom(rng)
        items += more
        words += body_words(more)
    return items


# --------------------------------------------------------------------------
# library catalogue


@dataclass
class LibraryBody:
    name: str
    library: str
    main: list
    init: list
    calls: dict = field(default_factory=dict)  # callee lib name -> count
    layout: Optional[str] = None  # name of a builtin parameter layout

    def renamed(self, perm: dict) -> "LibraryBody":
        return replace(self, main=rename_items(self.main, perm), init=rename_items(self.init, perm))

    def mnemonic_key(self) -> tuple:
        """Instruction texts with operands stripped; equal keys imply equal fingerprints."""
        return (_mnemonic_seq(self.main), _mnemonic_seq(self.init))


def _mnemonic_seq(items) -> tuple:
    out = []
    for it in items:
        if it[0] == "i":
            out.append(it[1].split()[0])
        elif it[0] in ("lit", "b"):
            out.append("ldr" if it[0] == "lit" else "b" + it[1])
        elif it[0] in ("call", "dyn"):
            out.append("call")
    return tuple(out)


def make_library(name: str, library: str = "Util", seed: Optional[int] = None, calls: Optional[dict] = None,
                 layout: Optional[str] = None, size: Optional[int] = None) -> LibraryBody:
    """Deterministic library function block; the seed defaults to a hash of the name."""
    seed = zlib.crc32(f"{library}:{name}".encode()) if seed is None else seed
    rng = random.Random(seed)
    data_base = LIB_DATA_BASE + (seed % 0x3F00) * 0x100
    reads_instance = layout is not None
    main = random_body(rng, size or rng.randint(4, 14), data_base, reads_instance)
    calls = dict(calls or {})
    for callee, count in sorted(calls.items()):
        for _ in range(count):
            # inserting never moves a label ahead of its branch
            main.insert(rng.randrange(1, len(main) + 1), ("call", callee, rng.choice(WORK_REGS)))
    init = [("lit", BASE_REG, data_base, None)] + random_body(rng, rng.randint(1, 3), data_base)
    for _ in range(rng.randint(2, 6)):
        off = 4 * rng.randrange(64)
        if rng.random() < 0.5:
            init.append(("i", f"mov {_r(rng)}, #{_imm(rng)}"))
        init.append(("i", f"str {_r(rng)}, [r{BASE_REG}, #{off}]"))
    return LibraryBody(name, library, main, init, calls, layout)


def library_catalogue(n: int, seed: int) -> list:
    """n libraries with pairwise distinct mnemonic sequences."""
    rng = random.Random(seed)
    # every body, main or INIT, must differ from all others and from the PID family
    seen = {body for lib in chemical_libraries().values() for body in lib.mnemonic_key()}
    out = []
    while len(out) < n:
        name = f"LIB_{len(out):04d}_{rng.getrandbits(16):04X}"
        lib = make_library(name, f"Lib{len(out) % 37:02d}", rng.getrandbits(32))
        main, init = lib.mnemonic_key()
        if main in seen or init in seen or main == init:
            continue
        seen.update((main, init))
        out.append(lib)
    return out


def chemical_libraries() -> dict:
    libs = [
        make_library("DERIVATIVE", "Util"),
        make_library("INTEGRAL", "Util"),
        make_library("PID_FIXCYCLE", "Util", calls={"DERIVATIVE": 1, "INTEGRAL": 2}, layout="PID_FIXCYCLE"),
        make_library("R_TRIG", "Standard"),
    ]
    return {lib.name: lib for lib in libs}


# --------------------------------------------------------------------------
# forge specs


@dataclass
class PidCall:
    caller: str
    instance: int
    params: dict  # name -> (value, source) ; source in literal|global|computed|io|immediate


@dataclass
class IoPlant:
    sub: str
    kind: str  # read | write
    addr: int
    guarded: bool = False


@dataclass
class ForgeSpec:
    seed: int = 0
    n_libs: int = 0
    n_user_fbs: int = 0
    calls: list = field(default_factory=list)  # (caller, callee, count); callee may be a symbol name
    io_accesses: list = field(default_factory=list)  # IoPlant
    globals: list = field(default_factory=list)  # (addr, value)
    pid_calls: list = field(default_factory=list)  # PidCall
    table_base: int = 0x01000000
    symbols: list = field(default_factory=list)  # (name, index)
    size_target: Optional[int] = None  # KB
    libs: list = field(default_factory=list)  # LibraryBody; n_libs random ones are added
    decoys: int = 0
    dispatch_base: int = 0
    stack_size: int = 0x4000
    name: str = "forged"

    def validate(self) -> None:
        for v in (self.n_libs, self.n_user_fbs, self.decoys):
            if v < 0:
                raise SpecInfeasible("counts must be non-negative")
        if not (TABLE_MIN <= self.table_base < TABLE_MAX) or self.table_base % 4:
            raise SpecInfeasible(f"table base {self.table_base:#x} outside {TABLE_MIN:#x}..{TABLE_MAX:#x}")
        idx = [i for _, i in self.symbols]
        if len(set(idx)) != len(idx) or any(not 0 <= i <= 0xFFFF for i in idx):
            raise SpecInfeasible("symbol indexes must be distinct u16 values")
        for name, _ in self.symbols:
            if not name or not all(0x20 < ord(c) < 0x7F for c in name):
                raise SpecInfeasible(f"symbol name {name!r} is not printable")
        for p in self.io_accesses:
            lo, hi = WAGO_INPUT if p.kind == "read" else WAGO_OUTPUT
            if not lo <= p.addr <= hi or p.addr % 4:
                raise SpecInfeasible(f"planted {p.kind} at {p.addr:#x} outside the declared I/O map")


# --------------------------------------------------------------------------
# manifest


@dataclass
class Manifest:
    name: str
    seed: int
    size: int
    sha256: str
    chk: int
    header: dict
    sections: dict
    subroutines: list
    table_base: int
    call_table: dict
    edges: list
    call_sites: list
    io: list
    symbols: list
    globals: list
    pid_calls: list
    libraries: list
    image_base: int = 0
    dispatch_base: int = 0

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Manifest":
        d = json.loads(text)
        d["call_table"] = {int(k): v for k, v in d["call_table"].items()}
        return cls(**d)

    @classmethod
    def load(cls, path) -> "Manifest":
        return cls.from_json(Path(path).read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    def edge_map(self) -> dict:
        return {(e["caller"], e["callee"], e["kind"]): e["count"] for e in self.edges}

    def io_set(self) -> set:
        return {(a["pc"], a["kind"], a["addr"]) for a in self.io}

    def start_of(self, name: str) -> int:
        return next(s["start"] for s in self.subroutines if s["name"] == name)


# --------------------------------------------------------------------------
# assembly


@lru_cache(maxsize=65536)
def _enc(text: str) -> int:
    return assemble(text, 0)


def _words(*ws) -> bytes:
    return struct.pack(f"<{len(ws)}I", *ws)


@dataclass
class _Sub:
    name: str
    role: str
    items: list
    start: int = 0
    code: bytes = b""
    marks: dict = field(default_factory=dict)
    literals: dict = field(default_factory=dict)  # tag -> file offset
    sites: list = field(default_factory=list)  # (dispatch_pc, callee, kind, sub_offset)
    end: int = 0
    pool_end: int = 0

    @property
    def size(self) -> int:
        n = body_words(self.items)
        lits = sum(1 for it in self.items if it[0] in ("lit", "call", "dyn"))
        return 4 * (len(PRO_WORDS) + n + 1 + lits)


def _assemble_sub(sub: _Sub, slot_of: dict, jump_of: dict) -> None:
    items = sub.items
    n = body_words(items)
    pc = sub.start + 4 * len(PRO_WORDS)
    pool_at = pc + 4 * n + 4
    labels = {}
    pos = pc
    for it in items:
        if it[0] == "label":
            labels[it[1]] = pos
        pos += 4 * _item_words(it)
    words = list(PRO_WORDS)
    pool = []

    def lit(reg, value, addr, tag=None):
        off = pool_at + 4 * len(pool) - (addr + 8)
        if not 0 <= off <= 4095:
            raise SpecInfeasible(f"{sub.name}: literal out of ldr reach ({off})")
        if tag is not None:
            sub.literals[tag] = pool_at + 4 * len(pool)
        pool.append(value & 0xFFFFFFFF)
        return _enc(f"ldr r{reg}, [pc, #{off}]")

    pos = pc
    for it in items:
        kind = it[0]
        if kind == "i":
            words.append(_enc(it[1]))
        elif kind == "w":
            words.append(it[1])
        elif kind == "lit":
            words.append(lit(it[1], it[2], pos, it[3] if len(it) > 3 else None))
        elif kind == "b":
            target = labels[it[2]]
            if target <= pos:
                raise SpecInfeasible(f"{sub.name}: backward branch in a generated body")
            words.append(assemble(f"b{it[1]} #{target:#x}", pos))
        elif kind == "mark":
            sub.marks[it[1]] = pos
        elif kind == "label":
            pass
        else:  # call / dyn
            ri = it[2]
            if kind == "call":
                offset, callee = slot_of[it[1]], it[1]
            else:
                offset, callee = jump_of[it[1]], f"sym:{it[1]}"
            seq = [_enc(f"str r{ri}, [sp, #-4]!"), _enc("str lr, [sp, #-4]!"),
                   lit(ri, offset, pos + 8), _enc(f"ldr r{ri}, [r{ri}]"), _enc("mov lr, pc"),
                   _enc(f"mov pc, r{ri}"), _enc("nop"), _enc("ldr lr, [sp], #4"), _enc(f"ldr r{ri}, [sp], #4")]
            words.extend(seq)
            sub.sites.append((pos + 20, callee, "static" if kind == "call" else "dynamic", offset))
        pos += 4 * _item_words(it)
    words.append(EPI_WORD)
    sub.end = sub.start + 4 * len(words)
    words.extend(pool)
    sub.code = _words(*words)
    sub.pool_end = sub.start + len(sub.code)


def _const_items(reg: int, value: int) -> list:
    parts = [value & (0xFF << s) for s in (0, 8, 16, 24) if value & (0xFF << s)] or [0]
    return [("i", f"{'orr' if k else 'mov'} r{reg}, {f'r{reg}, ' if k else ''}#{p:#x}")
            for k, p in enumerate(parts)]


def _memory_init_items(start: int, targets: list, table_base: int) -> list:
    """Zero-fill the table, then store each target's address computed from pc."""
    # no literals: a pool after thousands of stores would be out of ldr reach
    body = start + 4 * len(PRO_WORDS)
    items = _const_items(0, table_base) + _const_items(1, len(targets)) + [("i", "mov r2, #0")]
    loop = body + 4 * len(items)
    items += [("i", "str r2, [r0], #4"), ("i", "subs r1, r1, #1"),
              ("w", assemble(f"bne #{loop:#x}", loop + 8))]
    items += _const_items(1, table_base)
    pc = body + 4 * len(items)
    for t in targets:
        # image_base + t == pc_value - delta, whatever the load address
        delta = pc + 8 - t
        parts = [delta & (0xFF << s) for s in (0, 8, 16, 24) if delta & (0xFF << s)]
        for k, part in enumerate(parts):
            items.append(("i", f"sub r3, {'r3' if k else 'pc'}, #{part:#x}"))
            pc += 4
        items.append(("i", "str r3, [r1], #4"))
        pc += 4
    return items


# --------------------------------------------------------------------------
# statements for PLC_PRG and user FBs


def _io_items(rng: random.Random, plant: IoPlant, key: str) -> list:
    areg, vreg = rng.sample(WORK_REGS, 2)
    off = 0
    if rng.random() < 0.3:
        lo = WAGO_INPUT[0] if plant.kind == "read" else WAGO_OUTPUT[0]
        off = min(plant.addr - lo, 4 * rng.randrange(16))
    items = [("lit", areg, plant.addr - off)]
    mem = f"[r{areg}, #{off}]" if off else f"[r{areg}]"
    if plant.guarded:
        label = f"G{rng.getrandbits(40):x}"
        freg = next(r for r in WORK_REGS if r not in (areg, vreg))
        items += [("lit", freg, FLAG_BASE + 4 * rng.randrange(1024)), ("i", f"ldr r{freg}, [r{freg}]"),
                  ("i", f"cmp r{freg}, #1"), ("b", "ne", label)]
    if plant.kind == "write":
        items.append(("i", f"mov r{vreg}, #{_imm(rng)}"))
    items += [("mark", key), ("i", f"{'ldr' if plant.kind == 'read' else 'str'} r{vreg}, {mem}")]
    if plant.guarded:
        items.append(("label", label))
    return items


def _decoy_items(rng: random.Random) -> list:
    addr = rng.choice((WAGO_INPUT[0] - 4, WAGO_INPUT[1] + 4, WAGO_OUTPUT[0] - 4, WAGO_OUTPUT[1] + 4,
                       0x10000000, FB_DATA_BASE + 4 * rng.randrange(1024)))
    areg, vreg = rng.sample(WORK_REGS, 2)
    if rng.random() < 0.5:
        return [("lit", areg, addr), ("i", f"ldr r{vreg}, [r{areg}]")]
    return [("lit", areg, addr), ("i", f"str r{vreg}, [r{areg}]")]


def _pid_items(rng: random.Random, call: PidCall, layout, key: str, global_addr: dict) -> tuple:
    """Parameter stores into the instance followed by a dispatch; returns (items, plants)."""
    items = [("lit", 0, call.instance)]
    plants = []
    for p in layout.params:
        if p.name not in call.params:
            continue
        value, source = call.params[p.name]
        raw = p.type.encode(value) if source != "io" else 0
        st = "strb" if p.type.width == 1 else ("strh" if p.type.width == 2 else "str")
        tag = (key, p.name)
        if source == "literal":
            items += [("lit", 1, raw, tag), ("i", f"{st} r1, [r0, #{p.offset}]")]
        elif source == "global":
            items += [("lit", 2, global_addr[tag]), ("i", "ldr r1, [r2]"), ("i", f"{st} r1, [r0, #{p.offset}]")]
        elif source == "computed":
            b = rng.randrange(1, 256)
            items += [("lit", 1, (raw - b) & 0xFFFFFFFF), ("i", f"add r1, r1, #{b}"),
                      ("i", f"{st} r1, [r0, #{p.offset}]")]
        elif source == "io":
            addr = WAGO_INPUT[0] + 4 * rng.randrange((WAGO_INPUT[1] - WAGO_INPUT[0]) // 4 + 1)
            items += [("lit", 2, addr), ("mark", (key, p.name, "io")), ("i", "ldr r1, [r2]"),
                      ("i", f"{st} r1, [r0, #{p.offset}]")]
            plants.append(((key, p.name, "io"), addr))
        else:
            raise SpecInfeasible(f"unknown parameter source {source!r}")
    return items, plants


# --------------------------------------------------------------------------
# generation


def _perm_regs(seed: int) -> dict:
    rng = random.Random(seed)
    regs = list(range(1, 11))
    shuffled = regs[:]
    rng.shuffle(shuffled)
    return dict(zip(regs, shuffled))


def generate(spec: ForgeSpec):
    """Emit (prg bytes, chk bytes, Manifest) for a ForgeSpec."""
    spec.validate()
    extra = 0
    for _ in range(4):
        data, chk, manifest = _generate(spec, extra)
        short = (spec.size_target or 0) * 1024 - len(data)
        if short <= 0:
            break
        # shared literals make the size estimate optimistic; pad by the measured shortfall
        extra += short + 64
    return data, chk, manifest


def _generate(spec: ForgeSpec, extra: int):
    from .knowledge import BUILTIN_LAYOUTS  # parameter layouts are shared knowledge, not format

    rng = random.Random(spec.seed)
    libs = list(spec.libs)
    if spec.n_libs:
        libs += library_catalogue(spec.n_libs, rng.getrandbits(32))
    lib_names = {lib.name for lib in libs}
    for lib in libs:
        for callee in lib.calls:
            if callee not in lib_names:
                raise SpecInfeasible(f"{lib.name} calls missing library {callee}")
    fb_names = [f"FB_{i}" for i in range(spec.n_user_fbs)]
    sym_names = {name for name, _ in spec.symbols}
    jump_of = {name: spec.dispatch_base + idx * 4 + 8 for name, idx in spec.symbols}

    # global variables: planted ones plus PID parameters sourced from globals
    globals_ = list(spec.globals)
    global_addr = {}
    next_global = GLOBALS_BASE + 4 * len(globals_) + 0x100
    for ci, call in enumerate(spec.pid_calls):
        layout = BUILTIN_LAYOUTS["PID_FIXCYCLE"]
        for p in layout.params:
            if p.name in call.params and call.params[p.name][1] == "global":
                value = call.params[p.name][0]
                global_addr[(f"pid{ci}", p.name)] = next_global
                globals_.append((next_global, p.type.encode(value)))
                next_global += 4

    subs = [_Sub("GLOBAL_INIT", "GlobalInit", [])]
    for gi, (addr, value) in enumerate(globals_):
        subs[0].items += [("lit", 1, value, ("global", gi)), ("lit", 2, addr), ("i", "str r1, [r2]")]
    subs += [_Sub(n, "Support", []) for n in FIXED[1:4]]
    subs.append(_Sub("SYSDEBUG", "SysDebug", []))

    # statements planted into callers
    stmts: dict = {}
    io_keys = []
    pid_keys = []

    def add(caller, items):
        stmts.setdefault(caller, []).append(items)

    valid_callers = {"PLC_PRG"} | set(fb_names)
    for caller, callee, count in spec.calls:
        if caller not in valid_callers:
            raise SpecInfeasible(f"caller {caller} must be PLC_PRG or a user FB")
        if callee not in lib_names and callee not in fb_names and callee not in sym_names:
            raise SpecInfeasible(f"unknown callee {callee}")
        for _ in range(count):
            kind = "dyn" if callee in sym_names else "call"
            add(caller, [(kind, callee, rng.choice(WORK_REGS))])
    for k, plant in enumerate(spec.io_accesses):
        if plant.sub not in valid_callers:
            raise SpecInfeasible(f"I/O access host {plant.sub} must be PLC_PRG or a user FB")
        key = ("io", k)
        io_keys.append((key, plant))
        add(plant.sub, _io_items(rng, plant, key))
    pid_plants = []
    for ci, call in enumerate(spec.pid_calls):
        if "PID_FIXCYCLE" not in lib_names:
            raise SpecInfeasible("PID calls need the PID_FIXCYCLE library")
        key = f"pid{ci}"
        items, plants = _pid_items(rng, call, BUILTIN_LAYOUTS["PID_FIXCYCLE"], key, global_addr)
        items += [("mark", (key, "dispatch")), ("call", "PID_FIXCYCLE", rng.choice((3,) + tuple(range(4, 11))))]
        pid_keys.append((key, call))
        pid_plants += plants
        add(call.caller, items)
    for _ in range(spec.decoys):
        add(rng.choice(sorted(valid_callers)), _decoy_items(rng))

    def compose(caller, data_base):
        parts = stmts.get(caller, [])
        rng.shuffle(parts)
        items = [("lit", BASE_REG, data_base)]
        for part in parts:
            if rng.random() < 0.5:
                items += _idiom(rng)
            items += part
        return items

    for lib in libs:
        subs.append(_Sub(lib.name, "LibMain", list(lib.main)))
        subs.append(_Sub(lib.name + "_INIT", "LibInit", list(lib.init)))
    for i, fb in enumerate(fb_names):
        subs.append(_Sub(fb, "UserFb", compose(fb, FB_DATA_BASE + 0x1000 * i)))
        subs.append(_Sub(fb + "_INIT", "UserFbInit", filler_body(rng, rng.randint(3, 12), FB_DATA_BASE + 0x1000 * i)))
    plc = _Sub("PLC_PRG", "PlcPrg", compose("PLC_PRG", FB_DATA_BASE - 0x1000))

    # pad with filler FB pairs up to the size target
    if spec.size_target:
        target = spec.size_target * 1024 + extra
        # lower bound: Memory INIT spends at least 8 bytes per subroutine
        approx = HDR_LEN + sum(s.size for s in subs) + plc.size + 8 * (len(subs) + 1) + 48
        approx += sum(len(n) + 3 for n, _ in spec.symbols)
        k = 0
        while approx < target:
            words = min(MAX_BODY, max(16, (target - approx) // 4 - 48))
            main = _Sub(f"PAD_{k}", "UserFb", filler_body(rng, words, FB_DATA_BASE + 0x100 * (k % 4096)))
            init = _Sub(f"PAD_{k}_INIT", "UserFbInit", filler_body(rng, rng.randint(2, 8), FB_DATA_BASE))
            subs += [main, init]
            approx += main.size + init.size + 40
            k += 1

    subs.append(plc)
    for s in subs:
        if body_words(s.items) > MAX_BODY + 64:
            raise SpecInfeasible(f"{s.name}: body too large for one literal pool")

    # layout: every start is known once all bodies except Memory INIT exist
    pos = HDR_LEN
    for s in subs:
        s.start = pos
        pos += s.size
    slot_of = {s.name: spec.table_base + 4 * i for i, s in enumerate(subs)}
    mi = _Sub("MEMORY_INIT", "MemoryInit", [])
    mi.start = pos
    mi.items = _memory_init_items(mi.start, [s.start for s in subs], spec.table_base)
    subs.append(mi)
    for s in subs:
        _assemble_sub(s, slot_of, jump_of)
    code_end = mi.pool_end

    symtab = b"".join(n.encode("ascii") + b"\0" + struct.pack("<H", i) for n, i in spec.symbols)
    sym_start = code_end
    trail_start = sym_start + len(symtab)
    # global strings live after a NUL separator so the symbol scan stops before them; with no
    # symbol table the scan would start at the first printable byte, so no strings are emitted then
    trailing = b"\0\0"
    last_string = 0
    for _ in range(rng.randint(0, 4) if spec.symbols else 0):
        last_string = trail_start + len(trailing)
        trailing += f"VAR_{rng.getrandbits(24):06X}".encode() + b"\0"
    trailing += b"\0" * (-len(trailing) % 4)

    header = bytearray(HDR_LEN)
    struct.pack_into("<I", header, OFF_LAST_STRING, last_string)
    struct.pack_into("<I", header, OFF_ENTRY, mi.start - BIAS)
    struct.pack_into("<I", header, OFF_CODE_END, code_end - BIAS)
    struct.pack_into("<I", header, OFF_STACK, spec.stack_size)
    struct.pack_into("<I", header, OFF_DYNLIB, max((i for _, i in spec.symbols), default=0))
    data = bytes(header) + b"".join(s.code for s in subs) + symtab + trailing
    chk = sum(data) & 0xFFFFFFFF
    chk_bytes = struct.pack("<I", chk)

    by_name = {s.name: s for s in subs}
    edges: dict = {}
    sites = []
    for s in subs:
        for dpc, callee, kind, offset in s.sites:
            target = by_name[callee].start if kind == "static" else callee
            k = (s.start, target, kind)
            edges[k] = edges.get(k, 0) + 1
            sites.append({"caller": s.start, "dispatch_pc": dpc, "callee": target, "kind": kind,
                          "sub_offset": offset})
    io = []
    for key, plant in io_keys:
        host = by_name[plant.sub]
        io.append({"sub": host.start, "pc": host.marks[key], "kind": plant.kind, "addr": plant.addr,
                   "guarded": plant.guarded})
    for key, addr in pid_plants:
        host = next(s for s in subs if key in s.marks)
        io.append({"sub": host.start, "pc": host.marks[key], "kind": "read", "addr": addr, "guarded": False})
    io.sort(key=lambda a: (a["pc"], a["kind"], a["addr"]))

    gi = subs[0]
    globals_doc = [{"addr": a, "value": v, "literal_offset": gi.literals[("global", k)]}
                   for k, (a, v) in enumerate(globals_)]
    pid_doc = []
    layout = BUILTIN_LAYOUTS["PID_FIXCYCLE"]
    for key, call in pid_keys:
        host = by_name[call.caller]
        params = []
        for p in layout.params:
            value, source = call.params.get(p.name, (0, "unset"))
            raw = p.type.encode(value) if source not in ("io", "unset") else 0
            lit = None
            if source == "literal":
                lit = host.literals[(key, p.name)]
            elif source == "global":
                gidx = next(i for i, (a, _) in enumerate(globals_) if a == global_addr[(key, p.name)])
                lit = gi.literals[("global", gidx)]
            patchable = lit is not None and p.type.width == 4
            params.append({"name": p.name, "type": p.type.value, "raw": raw, "source": source,
                           "literal_offset": lit if patchable else None})
        pid_doc.append({"caller": host.start, "dispatch_pc": host.marks[(key, "dispatch")] + 20,
                        "instance": call.instance, "params": params})

    manifest = Manifest(
        name=spec.name, seed=spec.seed, size=len(data), sha256=hashlib.sha256(data).hexdigest(), chk=chk,
        header={"last_global_string": last_string, "entry_point": mi.start, "code_end": code_end,
                "stack_size": spec.stack_size, "last_dynlib_id": max((i for _, i in spec.symbols), default=0)},
        sections={"header": [0, HDR_LEN], "code": [HDR_LEN, code_end], "symbol_table": [sym_start, trail_start],
                  "trailing_data": [trail_start, len(data)]},
        subroutines=[{"name": s.name, "role": s.role, "start": s.start, "end": s.end, "pool_end": s.pool_end}
                     for s in subs],
        table_base=spec.table_base,
        call_table={slot_of[s.name]: s.start for s in subs if s is not mi},
        edges=[{"caller": c, "callee": t, "kind": k, "count": n}
               for (c, t, k), n in sorted(edges.items(), key=lambda kv: (kv[0][0], str(kv[0][1]), kv[0][2]))],
        call_sites=sorted(sites, key=lambda x: x["dispatch_pc"]),
        io=io,
        symbols=[{"name": n, "index": i, "jump_offset": i * 4 + 8} for n, i in spec.symbols],
        globals=globals_doc,
        pid_calls=pid_doc,
        libraries=[{"name": lib.name, "library": lib.library, "start": by_name[lib.name].start,
                    "init_start": by_name[lib.name + "_INIT"].start} for lib in libs],
        dispatch_base=spec.dispatch_base,
    )
    self_check(data, chk_bytes, manifest)
    return data, chk_bytes, manifest


def _aligned_find(hay: bytes, needle: bytes) -> bool:
    pos = hay.find(needle)
    while pos != -1:
        if pos % 4 == 0:
            return True
        pos = hay.find(needle, pos + 1)
    return False


def self_check(data: bytes, chk_bytes: bytes, m: Manifest) -> None:
    """Verify the emitted bytes against the manifest using only forge constants."""
    def word(off):
        return struct.unpack_from("<I", data, off)[0]

    problems = []
    if len(data) != m.size or sum(data) & 0xFFFFFFFF != m.chk or struct.unpack("<I", chk_bytes)[0] != m.chk:
        problems.append("size or checksum")
    if word(OFF_ENTRY) + BIAS != m.header["entry_point"] or word(OFF_CODE_END) + BIAS != m.header["code_end"]:
        problems.append("header pointers")
    prev = HDR_LEN
    for s in m.subroutines:
        if s["start"] != prev:
            problems.append(f"{s['name']}: gap before start")
        if tuple(word(s["start"] + 4 * i) for i in range(3)) != PRO_WORDS:
            problems.append(f"{s['name']}: prologue")
        if word(s["end"] - 4) != EPI_WORD:
            problems.append(f"{s['name']}: epilogue")
        body = data[s["start"] + 12:s["end"] - 4]
        pool = data[s["end"]:s["pool_end"]]
        if _aligned_find(body, _words(EPI_WORD)) or _aligned_find(body + pool, _words(*PRO_WORDS)):
            problems.append(f"{s['name']}: delimiter pattern inside body or pool")
        prev = s["pool_end"]
    if prev != m.sections["code"][1]:
        problems.append("code end")
    if m.subroutines[-1]["start"] != m.header["entry_point"]:
        problems.append("entry is not the last subroutine")
    for g in m.globals:
        if word(g["literal_offset"]) != g["value"]:
            problems.append(f"global literal at {g['literal_offset']:#x}")
    for call in m.pid_calls:
        for p in call["params"]:
            if p["literal_offset"] is not None and word(p["literal_offset"]) != p["raw"]:
                problems.append(f"PID literal {p['name']}")
    sym = m.sections["symbol_table"]
    if sym[1] < len(data) and 0x20 <= data[sym[1]] < 0x7F:
        problems.append("printable byte after the symbol table")
    if problems:
        raise SelfCheckFailed("; ".join(problems))


# --------------------------------------------------------------------------
# presets and corpora


PID_DEFAULTS = {"SET_POINT": 50.0, "KP": 1.5, "TN": 2.0, "TV": 0.25, "Y_MANUAL": 0.0, "Y_OFFSET": 0.0,
                "Y_MIN": 0.0, "Y_MAX": 100.0, "MANUAL": False, "RESET": False, "CYCLE": 0.1}


def minimal_spec(seed: int = 0) -> ForgeSpec:
    return ForgeSpec(seed=seed, name="minimal")


def chemical_process_spec(seed: int = 7) -> ForgeSpec:
    """Two PID loops and a rising-edge trigger, shaped after a small process controller."""
    libs = chemical_libraries()
    order = [libs[n] for n in ("DERIVATIVE", "INTEGRAL", "PID_FIXCYCLE", "R_TRIG")]
    pid1 = dict((k, (v, "literal")) for k, v in PID_DEFAULTS.items())
    pid1["ACTUAL"] = (0.0, "io")
    pid2 = dict(pid1)
    pid2.update(KP=(0.8, "global"), SET_POINT=(2800.0, "literal"), TN=(4.0, "computed"))
    return ForgeSpec(
        seed=seed, name="chemical_process", libs=order,
        calls=[("PLC_PRG", "R_TRIG", 1)],
        pid_calls=[PidCall("PLC_PRG", INSTANCE_BASE, pid1), PidCall("PLC_PRG", INSTANCE_BASE + 0x100, pid2)],
        io_accesses=[IoPlant("PLC_PRG", "read", 0x28CFEC04), IoPlant("PLC_PRG", "write", 0x28CFD800),
                     IoPlant("PLC_PRG", "write", 0x28CFD804, guarded=True)],
        globals=[(GLOBALS_BASE, 0x42F00000)],
        decoys=2,
    )


def library_binary_spec(lib: LibraryBody, deps: list = (), seed: int = 0, perm_seed: Optional[int] = None,
                        pad: int = 0) -> ForgeSpec:
    """One library pair placed last before PLC_PRG, after its dependencies and ``pad`` filler pairs.

    ``perm_seed`` renames registers throughout the bodies; ``pad`` shifts the pair to new offsets.
    """
    if perm_seed is not None:
        lib = lib.renamed(_perm_regs(perm_seed))
        deps = [d.renamed(_perm_regs(perm_seed + 1 + i)) for i, d in enumerate(deps)]
    fillers = [make_library(f"PAD_{seed}_{i}", "Pad", seed * 1000 + i) for i in range(pad)]
    return ForgeSpec(seed=seed, name=lib.name, libs=list(deps) + fillers + [lib],
                     calls=[("PLC_PRG", lib.name, 1)])


SYMBOL_POOL = ("real_add", "real_sub", "real_mul", "real_div", "SysTimeGetMs", "SysMemCpy", "SysMemSet",
               "CurTimeEx", "SysComRead", "SysComWrite", "SysFileOpen", "SysFileClose", "expt", "sqrt", "sin",
               "cos", "trunc", "real_to_dint", "dint_to_real", "string_concat")


def random_spec(rng: random.Random, size_kb: Optional[int] = None, name: str = "forged") -> ForgeSpec:
    n_fbs = rng.randint(0, 4)
    use_pid = rng.random() < 0.4
    libs = list(chemical_libraries().values()) if use_pid else []
    libs += library_catalogue(rng.randint(0, 4), rng.getrandbits(32))
    n_sym = rng.randint(0, 8)
    names = rng.sample(SYMBOL_POOL, n_sym)
    indexes = rng.sample(range(0x10, 0x400), n_sym)
    symbols = [(f"{n}" if rng.random() < 0.7 else f"{n}_{rng.randrange(100)}", i) for n, i in zip(names, indexes)]
    # symbol names must stay unique after suffixing
    seen = set()
    symbols = [(n, i) for n, i in symbols if not (n in seen or seen.add(n))]
    spec = ForgeSpec(seed=rng.getrandbits(32), n_user_fbs=n_fbs, libs=libs, symbols=symbols,
                     table_base=TABLE_MIN + 4 * rng.randrange((TABLE_MAX - TABLE_MIN) // 4 - 0x10000),
                     size_target=size_kb, decoys=rng.randint(0, 4), name=name)
    callers = ["PLC_PRG"] + [f"FB_{i}" for i in range(n_fbs)]
    # PID_FIXCYCLE is only called through planted PID calls, which set up its instance
    lib_names = [lib.name for lib in libs if lib.name != "PID_FIXCYCLE"]
    for caller in callers:
        for callee in rng.sample(lib_names, rng.randint(0, len(lib_names))):
            spec.calls.append((caller, callee, rng.randint(1, 3)))
        if caller == "PLC_PRG":
            for fb in rng.sample(callers[1:], rng.randint(0, len(callers) - 1)):
                spec.calls.append((caller, fb, rng.randint(1, 2)))
        for sym, _ in rng.sample(symbols, rng.randint(0, len(symbols))):
            spec.calls.append((caller, sym, rng.randint(1, 2)))
        for _ in range(rng.randint(0, 4)):
            kind = rng.choice(("read", "write"))
            lo, hi = WAGO_INPUT if kind == "read" else WAGO_OUTPUT
            addr = lo + 4 * rng.randrange((hi - lo) // 4 + 1)
            if rng.random() < 0.1:
                addr = rng.choice((lo, hi))
            spec.io_accesses.append(IoPlant(caller, kind, addr, rng.random() < 0.25))
    for k in range(rng.randint(0, 5)):
        spec.globals.append((GLOBALS_BASE + 4 * k, rng.getrandbits(32)))
    if use_pid:
        for c in range(rng.randint(1, 2)):
            spec.pid_calls.append(random_pid_call(rng, rng.choice(callers), INSTANCE_BASE + 0x100 * c))
    return spec


def random_pid_call(rng: random.Random, caller: str, instance: int) -> PidCall:
    params = {}
    for name, default in PID_DEFAULTS.items():
        if isinstance(default, bool):
            params[name] = (rng.random() < 0.5, "literal")
            continue
        value = struct.unpack("<f", struct.pack("<f", rng.uniform(0.01, 500.0)))[0]
        params[name] = (value, rng.choice(("literal", "literal", "global", "computed")))
    params["KP"] = (params["KP"][0], rng.choice(("literal", "global")))
    if rng.random() < 0.5:
        params["ACTUAL"] = (0.0, "io")
    return PidCall(caller, instance, params)


def corpus_sizes(n: int, rng: random.Random, lo: int = 4, hi: int = 550) -> list:
    """Sizes skewed toward small programs, always including both extremes."""
    sizes = [lo, hi][:n]
    while len(sizes) < n:
        u = rng.random()
        sizes.append(int(lo * (hi / lo) ** (u * u)))
    return sizes


def generate_corpus(n: int, seed: int, outdir=None, lo_kb: int = 4, hi_kb: int = 550) -> list:
    """n reproducible binaries; written as <name>.prg/.chk/.manifest.json when outdir is given."""
    if n < 1:
        raise SpecInfeasible("corpus needs at least one binary")
    rng = random.Random(seed)
    sizes = corpus_sizes(n, rng, lo_kb, hi_kb)
    out = []
    for i, size in enumerate(sizes):
        name = f"prg_{i:03d}"
        sub_rng = random.Random(rng.getrandbits(64))
        spec = minimal_spec(sub_rng.getrandbits(32)) if i == 0 else random_spec(sub_rng, size, name)
        spec.name = name
        if i == 0:
            spec.size_target = size
        data, chk, manifest = generate(spec)
        if outdir is not None:
            d = Path(outdir)
            d.mkdir(parents=True, exist_ok=True)
            (d / f"{name}.prg").write_bytes(data)
            (d / f"{name}.chk").write_bytes(chk)
            manifest.save(d / f"{name}.manifest.json")
        out.append((name, data, chk, manifest))
    return out
