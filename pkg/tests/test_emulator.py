import random

import pytest
import unicorn
from unicorn import arm_const as A

from plcrev.binfmt import parse_prg
from plcrev.emulator import (HaltReason, IncompleteTable, MachineState, RunConfig,
                             recover_call_table, run, snapshot_globals)

from prgkit import build, stub

UC_REGS = [getattr(A, f"UC_ARM_REG_R{i}") for i in range(13)] + [A.UC_ARM_REG_SP, A.UC_ARM_REG_LR]
DATA = 0x00400000


def seven(**over):
    bodies = [stub() for _ in range(7)]
    for i, b in over.items():
        bodies[int(i[1:])] = b
    return parse_prg(build(bodies)[0])


def test_empty_subroutine_returns():
    prg = parse_prg(build([([], []) for _ in range(7)])[0])
    st0 = MachineState.zeroed()
    st, trace, reason = run(prg, RunConfig(prg.subroutines[2].start), st0)
    assert reason == HaltReason.Returned
    assert st.regs[13] == st0.regs[13]
    assert all(r.addr >= st0.regs[13] - 12 for r in trace.records)


def test_budget_exhausted():
    start = 0x50 + 3 * 20
    loop = start + 12
    prg = seven(s3=([f"b #{loop:#x}"], []))
    st, trace, reason = run(prg, RunConfig(start, step_budget=10))
    assert reason == HaltReason.BudgetExhausted
    assert st.step_count == 10


def test_breakpoint_and_left_code():
    prg = seven(s3=(["mov r0, #1", "mov pc, #0x10000"], []))
    start = prg.subroutines[3].start
    _, _, reason = run(prg, RunConfig(start, halt_at={start + 16}))
    assert reason == HaltReason.Breakpoint
    st, _, reason = run(prg, RunConfig(start))
    assert reason == HaltReason.LeftCode and st.regs[0] == 1


def test_decode_fault():
    prg = seven(s3=([0xEE000A10], []))
    _, _, reason = run(prg, RunConfig(prg.subroutines[3].start))
    assert reason == HaltReason.DecodeFault


def test_unwritten_memory_is_synthetic():
    prg = seven(s3=(["ldr r1, [pc, #{pool:0}]", "ldr r0, [r1]", "str r0, [r1, #4]"], [DATA]))
    st, trace, reason = run(prg, RunConfig(prg.subroutines[3].start))
    reads = [r for r in trace.records if r.kind == "read" and r.addr == DATA]
    assert reads and reads[0].synthetic and reads[0].value == 0
    literal = [r for r in trace.records if r.kind == "read" and r.value == DATA][0]
    assert not literal.synthetic
    assert trace.to_jsonl().count("\n") == len(trace.records)


def test_determinism():
    prg = seven(s3=(["ldr r1, [pc, #{pool:0}]", "mov r2, #7", "str r2, [r1], #4", "str r2, [r1]"], [DATA]))
    a = run(prg, RunConfig(prg.subroutines[3].start))
    b = run(prg, RunConfig(prg.subroutines[3].start))
    assert a[0].fingerprint() == b[0].fingerprint()
    assert a[1].records == b[1].records


def _table_prg():
    n = 7
    bodies = [stub() for _ in range(n - 1)]
    starts = [0x50 + 20 * i for i in range(n - 1)]
    mi_start = 0x50 + 20 * (n - 1)
    ins = ["ldr r1, [pc, #{pool:0}]"]
    for s in starts:
        addr = mi_start + 12 + 4 * len(ins)
        delta = addr + 8 - s
        ins.append(f"sub r3, pc, #{delta}")
        ins.append("str r3, [r1], #4")
    bodies.append((ins, [0x01000000]))
    data, got = build(bodies)
    assert got[:-1] == starts
    return parse_prg(data), starts


@pytest.mark.parametrize("base", [0, 0x10000, 0x00C00000])
def test_recover_call_table_base_independent(base):
    prg, starts = _table_prg()
    table = recover_call_table(prg, image_base=base)
    assert table.slots == {0x01000000 + 4 * i: s for i, s in enumerate(starts)}
    assert table.sound


def test_incomplete_table():
    prg = seven()
    with pytest.raises(IncompleteTable) as exc:
        recover_call_table(prg)
    assert len(exc.value.missing) == 6


def test_snapshot_globals():
    prg = seven(s0=(["ldr r1, [pc, #{pool:0}]", "ldr r2, [pc, #{pool:1}]", "str r1, [r2]"],
                    [0x42F00000, DATA + 0x40]))
    a = snapshot_globals(prg)
    b = snapshot_globals(prg)
    assert a.mem[DATA + 0x40] == 0x42F00000
    assert a.fingerprint() == b.fingerprint()
    empty = snapshot_globals(seven())
    stack = {k for k in empty.mem if k >= 0x7FFE0000}
    assert set(empty.mem) == stack


def test_stub_intercept():
    # dispatch through an unpopulated slot returns immediately with r0 = 0
    ins = ["mov r0, #5", "str r4, [sp, #-4]!", "str lr, [sp, #-4]!", "ldr r4, [pc, #{pool:0}]",
           "ldr r4, [r4]", "mov lr, pc", "mov pc, r4", "nop", "ldr lr, [sp], #4", "ldr r4, [sp], #4"]
    prg = seven(s5=(ins, [0x210]))
    st, trace, reason = run(prg, RunConfig(prg.subroutines[5].start))
    assert reason == HaltReason.Returned
    assert st.regs[0] == 0
    assert len(trace.stubs) == 1


def test_provenance_tags():
    prg = seven(s3=(["ldr r1, [pc, #{pool:0}]", "ldr r2, [pc, #{pool:1}]", "str r1, [r2]", "ldr r3, [r2]",
                     "add r4, r3, #0"], [0x3FC00000, DATA]))
    sub = prg.subroutines[3]
    st, _, _ = run(prg, RunConfig(sub.start))
    assert st.regtags[3] == ("literal", sub.end, 4)
    assert st.regtags[4] is None
    assert st.memtags[DATA][0] == ("literal", sub.end, 4)


# -- differential against unicorn -------------------------------------------

def _rand_dp(rng):
    cond = rng.randrange(15)
    op = rng.randrange(16)
    s = rng.randrange(2)
    rn, rd = rng.randrange(13), rng.randrange(13)
    if 8 <= op <= 11:
        s, rd = 1, 0
    if op in (13, 15):
        rn = 0
    w = (cond << 28) | (op << 21) | (s << 20) | (rn << 16) | (rd << 12)
    kind = rng.randrange(4)
    if kind == 0:
        return w | (1 << 25) | rng.randrange(1 << 12)
    if kind == 1:
        return w | (rng.randrange(32) << 7) | (rng.randrange(4) << 5) | rng.randrange(13)
    if kind == 2:
        return w | (rng.randrange(13) << 8) | (rng.randrange(4) << 5) | 0x10 | rng.randrange(13)
    acc = rng.randrange(2)
    rd, rm = rng.randrange(13), rng.randrange(13)
    return (cond << 28) | (acc << 21) | (rng.randrange(2) << 20) | (rd << 16) | \
        ((rng.randrange(13) if acc else 0) << 12) | (rng.randrange(13) << 8) | 0x90 | rm


def _rand_mem(rng):
    cond = rng.randrange(15)
    kind = rng.randrange(3)
    rn = rng.randrange(1, 5)
    load = rng.randrange(2)
    # loads never clobber the pointer (r1-r4) or index (r5-r7) registers
    rt = rng.choice([0, 8, 9, 10, 11, 12] if load else [r for r in range(13) if r != rn])
    pre = rng.randrange(2)
    up = rng.randrange(2)
    if kind == 0:
        byte = rng.randrange(2)
        wb = rng.randrange(2) if pre else 0
        off = rng.randrange(0, 256) * (1 if byte else 4)
        return (cond << 28) | (2 << 25) | (pre << 24) | (up << 23) | (byte << 22) | (wb << 21) | \
            (load << 20) | (rn << 16) | (rt << 12) | off
    if kind == 1:
        rm = rng.randrange(5, 8)
        wb = rng.randrange(2) if pre else 0
        return (cond << 28) | (3 << 25) | (pre << 24) | (up << 23) | (wb << 21) | (load << 20) | \
            (rn << 16) | (rt << 12) | (rng.choice((0, 2)) << 7) | rm
    regs = 0
    while not regs:
        regs = rng.randrange(1 << 13)
    if load:
        regs &= ~0xFE
        regs = regs or 1
    wb = rng.randrange(2)
    if wb:
        regs &= ~(1 << rn)
        regs = regs or 1 << 12
    mode = rng.randrange(4)
    return (cond << 28) | (4 << 25) | (mode << 23) | (wb << 21) | (load << 20) | (rn << 16) | regs


def _differential(gen, seed, n_programs=150, length=12):
    rng = random.Random(seed)
    for _ in range(n_programs):
        prog = [gen(rng) for _ in range(length)]
        bodies = [stub() for _ in range(7)]
        bodies[3] = (prog, [])
        prg = parse_prg(build(bodies)[0])
        start = prg.subroutines[3].start + 12
        stop = start + 4 * length
        regs = [rng.getrandbits(32) for _ in range(13)]
        for r in range(1, 5):
            regs[r] = DATA + 0x8000 + 4 * rng.randrange(256)
        for r in range(5, 8):
            regs[r] = 4 * rng.randrange(64)
        flags = rng.randrange(16)
        st = MachineState.zeroed()
        st.regs[:13] = regs
        st.n, st.z, st.c, st.v = (flags >> 3) & 1, (flags >> 2) & 1, (flags >> 1) & 1, flags & 1
        mine, trace, reason = run(prg, RunConfig(start, halt_at={stop}), st)
        assert reason == HaltReason.Breakpoint

        uc = unicorn.Uc(unicorn.UC_ARCH_ARM, unicorn.UC_MODE_ARM)
        uc.mem_map(0, 0x10000)
        uc.mem_write(0, prg.data)
        uc.mem_map(DATA, 0x10000)
        uc.mem_map(0x7FFE0000, 0x20000)
        for i, v in enumerate(regs):
            uc.reg_write(UC_REGS[i], v)
        uc.reg_write(A.UC_ARM_REG_SP, st.regs[13])
        cpsr = uc.reg_read(A.UC_ARM_REG_CPSR)
        uc.reg_write(A.UC_ARM_REG_CPSR, (cpsr & 0x0FFFFFFF) | (flags << 28))
        uc.emu_start(start, stop)
        theirs = [uc.reg_read(r) for r in UC_REGS[:13]]
        tflags = uc.reg_read(A.UC_ARM_REG_CPSR) >> 28
        mflags = (mine.n << 3) | (mine.z << 2) | (mine.c << 1) | mine.v
        listing = "\n".join(i.text for i in prg.subroutines[3].instrs)
        assert mine.regs[:13] == theirs, listing
        assert mflags == tflags, listing
        for addr, value in mine.mem.items():
            if DATA <= addr < DATA + 0x10000:
                assert int.from_bytes(uc.mem_read(addr, 4), "little") == value, listing


def test_dataprocessing_matches_unicorn():
    _differential(_rand_dp, 1)


def test_load_store_matches_unicorn():
    _differential(_rand_mem, 2)
