"""Tiny hand assembler for test binaries (independent of the forge)."""
from __future__ import annotations

import struct

from plcrev.armdec import assemble

PRO = [0xE1A0C00D, 0xE92D5800, 0xE1A0B00C]
EPI = 0xE91BA800


def words(*ws) -> bytes:
    return struct.pack(f"<{len(ws)}I", *ws)


def build(bodies, symbols=(), trailing=b""):
    """bodies: list of (instruction list, pool words); instructions are text or ints.

    Text instructions may use ``{pool:N}`` to mean the pc-relative offset of
    pool word N of the same subroutine.  The last body is the entry point.
    Returns (bytes, starts).
    """
    starts, chunks = [], []
    pos = 0x50
    for ins, pool in bodies:
        starts.append(pos)
        pool_at = pos + 4 * (len(PRO) + len(ins) + 1)
        enc = []
        for k, t in enumerate(ins):
            addr = pos + 4 * (len(PRO) + k)
            if isinstance(t, int):
                enc.append(t)
                continue
            if "{pool:" in t:
                head, rest = t.split("{pool:")
                n, tail = rest.split("}", 1)
                t = f"{head}{pool_at + 4 * int(n) - addr - 8}{tail}"
            enc.append(assemble(t, addr))
        chunk = words(*PRO, *enc, EPI, *pool)
        chunks.append(chunk)
        pos += len(chunk)
    hdr = bytearray(0x50)
    struct.pack_into("<I", hdr, 0x20, starts[-1] - 0x18)
    struct.pack_into("<I", hdr, 0x2C, pos - 0x18)
    sym = b"".join(name.encode() + b"\0" + struct.pack("<H", idx) for name, idx in symbols)
    return bytes(hdr) + b"".join(chunks) + sym + trailing, starts


def stub():
    return (["mov r0, #0"], [])


TABLE = 0x01000000


def dispatch(ri: int, pool_index: int) -> list:
    """The nine-word indirect call through the literal in pool slot ``pool_index``."""
    return [f"str r{ri}, [sp, #-4]!", "str lr, [sp, #-4]!", f"ldr r{ri}, [pc, #{{pool:{pool_index}}}]",
            f"ldr r{ri}, [r{ri}]", "mov lr, pc", f"mov pc, r{ri}", "nop", "ldr lr, [sp], #4",
            f"ldr r{ri}, [sp], #4"]


def build_with_table(bodies, symbols=(), table=TABLE):
    """Like build(), appending a Memory INIT that stores every start at table + 4*i."""
    def mi(starts, mi_start):
        ins = ["ldr r1, [pc, #{pool:0}]"]
        for s in starts:
            addr = mi_start + 12 + 4 * len(ins)
            ins.append(f"sub r3, pc, #{addr + 8 - s}")
            ins.append("str r3, [r1], #4")
        return ins, [table]
    n = len(bodies)
    _, starts = build(list(bodies) + [(["mov r0, r0"] * (1 + 2 * n), [0])], symbols)
    data, again = build(list(bodies) + [mi(starts[:-1], starts[-1])], symbols)
    assert again == starts
    return data, starts
