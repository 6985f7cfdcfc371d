"""Reference-disassembler plumbing for the differential decoder tests.

Random words are built from per-class bit templates (independently of the
decoder under test) and both listings are normalised to a common textual
form before comparison.
"""
from __future__ import annotations

import random
import re

import capstone

_md = capstone.Cs(capstone.CS_ARCH_ARM, capstone.CS_MODE_ARM)
_md.syntax = capstone.CS_OPT_SYNTAX_NOREGNAME


def reference_text(word: int, addr: int) -> str | None:
    insns = list(_md.disasm(word.to_bytes(4, "little"), addr))
    if not insns:
        return None
    ins = insns[0]
    return f"{ins.mnemonic} {ins.op_str}".strip()


_NUM = re.compile(r"#(-?)(0x[0-9a-f]+|\d+)")
_COND = "(eq|ne|cs|cc|hs|lo|mi|pl|vs|vc|hi|ls|ge|lt|gt|le)?"
_STACK = {"stmfd": "stmdb", "stmea": "stmia", "stmfa": "stmib", "stmed": "stmda",
          "ldmfd": "ldmia", "ldmea": "ldmdb", "ldmfa": "ldmda", "ldmed": "ldmib"}


def _num(m: re.Match) -> str:
    value = int(m.group(2), 0)
    return f"#{'-' if m.group(1) else ''}{value}"


def normalize(text: str, word: int) -> str:
    """Canonical comparison form shared by both disassemblers."""
    text = text.strip().lower()
    text = re.sub(r"\s+", " ", text)
    text = _NUM.sub(_num, text)
    head, _, ops = text.partition(" ")
    m = re.fullmatch(r"(svc|swi)" + _COND, head)
    if m:
        head = "svc" + (m.group(2) or "")
    m = re.fullmatch(r"nop" + _COND, head)
    if m:
        head, ops = "mov" + (m.group(1) or ""), "r0, r0"
    m = re.fullmatch(r"(push|pop)" + _COND, head)
    if m:
        cond = m.group(2) or ""
        if m.group(1) == "push":
            head, ops = "stmdb" + cond, "sp!, " + ops
        elif (word >> 25) & 7 == 2:
            head, ops = "ldr" + cond, ops.strip("{}") + ", [sp], #4"
        else:
            head, ops = "ldmia" + cond, "sp!, " + ops
    m = re.fullmatch(r"(ldm|stm)(ia|ib|da|db|fd|fa|ed|ea)?" + _COND, head)
    if m:
        mode = m.group(2) or "ia"
        name = m.group(1) + mode
        head = _STACK.get(name, name) + (m.group(3) or "")
    head = re.sub(r"hs$", "cs", head)
    head = re.sub(r"lo$", "cc", head)
    ops = ops.replace("apsr_nzcvqg", "cpsr_fs").replace("apsr_nzcvq", "cpsr_f")
    ops = ops.replace("apsr_g", "cpsr_s").replace("apsr", "cpsr")
    return f"{head} {ops}".strip()


def random_supported_word(rng: random.Random) -> int:
    """Random word from one of the supported A32 classes."""
    cond = rng.randrange(15) << 28
    cls = rng.choice(("dpi", "dpr", "dprs", "mul", "ldst_i", "ldst_r", "ldsth",
                      "lsm", "branch", "mrs", "msr", "msri", "bx", "swi"))
    r = lambda: rng.randrange(16)  # noqa: E731
    if cls in ("dpi", "dpr", "dprs"):
        opcode = rng.randrange(16)
        s = rng.randrange(2)
        rn, rd = r(), r()
        if 8 <= opcode <= 11:
            s, rd = 1, 0
        if opcode in (13, 15):
            rn = 0
        w = cond | (opcode << 21) | (s << 20) | (rn << 16) | (rd << 12)
        if cls == "dpi":
            return w | (1 << 25) | rng.randrange(1 << 12)
        if cls == "dpr":
            return w | (rng.randrange(32) << 7) | (rng.randrange(4) << 5) | r()
        return w | (r() << 8) | (rng.randrange(4) << 5) | 0x10 | r()
    if cls == "mul":
        a = rng.randrange(2)
        rn = r() if a else 0
        return cond | (a << 21) | (rng.randrange(2) << 20) | (r() << 16) | (rn << 12) | (r() << 8) | 0x90 | r()
    if cls in ("ldst_i", "ldst_r"):
        w = cond | (2 << 25) | (rng.randrange(32) << 20) | (r() << 16) | (r() << 12)
        if cls == "ldst_i":
            return w | rng.randrange(1 << 12)
        return w | (1 << 25) | (rng.randrange(32) << 7) | (rng.randrange(4) << 5) | r()
    if cls == "ldsth":
        load = rng.randrange(2)
        sh = rng.choice((1, 2, 3)) if load else 1
        p = rng.randrange(2)
        wb = rng.randrange(2) if p else 0
        imm = rng.randrange(2)
        w = cond | (p << 24) | (rng.randrange(2) << 23) | (imm << 22) | (wb << 21) | (load << 20)
        w |= (r() << 16) | (r() << 12) | 0x90 | (sh << 5)
        if imm:
            return w | (rng.randrange(16) << 8) | rng.randrange(16)
        return w | r()
    if cls == "lsm":
        regs = 0
        while not regs:
            regs = rng.randrange(1 << 16)
        return cond | (4 << 25) | (rng.randrange(16) << 21) | (rng.randrange(2) << 20) | (r() << 16) | regs
    if cls == "branch":
        return cond | (5 << 25) | (rng.randrange(2) << 24) | rng.randrange(1 << 24)
    if cls == "mrs":
        return cond | 0x010F0000 | (rng.randrange(2) << 22) | (r() << 12)
    if cls == "msr":
        return cond | 0x0120F000 | (rng.randrange(2) << 22) | (rng.randrange(1, 16) << 16) | r()
    if cls == "msri":
        return cond | 0x0320F000 | (rng.randrange(2) << 22) | (rng.randrange(1, 16) << 16) | rng.randrange(1 << 12)
    if cls == "bx":
        return cond | 0x012FFF10 | r()
    return cond | 0x0F000000 | rng.randrange(1 << 24)
