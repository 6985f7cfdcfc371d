import struct

import pytest
from hypothesis import given, strategies as st

from plcrev import patch
from plcrev.analysis import analyze, build_cfg
from plcrev.binfmt import parse_prg
from plcrev.emulator import recover_call_table
from plcrev.patch import PatchOp, apply, compute_chk, patch_argument

from forgekit import chemical, chemical_db, pid_binary


def test_chk_examples():
    assert compute_chk(bytes([1, 2, 3])) == 6
    assert compute_chk(b"") == 0
    n = 1 << 25  # enough 0xff bytes to wrap the u32 sum
    assert compute_chk(b"\xff" * n) == (0xFF * n) % 2**32


@given(st.binary(min_size=1, max_size=512), st.data())
def test_chk_additive(data, draw):
    i = draw.draw(st.integers(0, len(data) - 1))
    y = draw.draw(st.integers(0, 255))
    patched = data[:i] + bytes([y]) + data[i + 1:]
    assert compute_chk(patched) == (compute_chk(data) - data[i] + y) % 2**32


def test_zero_ops_identity():
    data = bytes(range(200))
    out, chk, raw = apply(data, [])
    assert out == data and chk == compute_chk(data) and raw == struct.pack("<I", chk)


def test_apply_errors():
    data = bytes(16)
    with pytest.raises(patch.OldMismatch):
        apply(data, [PatchOp(4, b"\1", b"\2")])
    with pytest.raises(patch.Overlap):
        apply(data, [PatchOp(4, b"\0\0", b"\1\1"), PatchOp(5, b"\0", b"\2")])
    with pytest.raises(patch.OutOfBounds):
        apply(data, [PatchOp(15, b"\0\0", b"\1\1")])
    with pytest.raises(ValueError):
        PatchOp(0, b"\0", b"\1\1")


def test_double_application_refused():
    data = bytes(8)
    ops = [PatchOp(2, b"\0\0", b"\xaa\xbb")]
    out, chk, _ = apply(data, ops)
    assert out == b"\0\0\xaa\xbb\0\0\0\0" and chk == 0xAA + 0xBB
    with pytest.raises(patch.OldMismatch):
        apply(out, ops)


def test_script_roundtrip():
    ops = [PatchOp(0x548, b"\x00\x00\xc0\x3f", b"\x14\xae\xc7\x3f", "kp")]
    assert patch.load_script(patch.dump_script(ops)) == ops


def test_apply_file(tmp_path):
    src = tmp_path / "a.prg"
    src.write_bytes(bytes(32))
    dst = tmp_path / "b.prg"
    chk = patch.apply_file(src, dst, [PatchOp(0, b"\0", b"\7")])
    assert chk == 7 and dst.read_bytes()[0] == 7 and src.read_bytes() == bytes(32)
    assert (tmp_path / "b.chk").read_bytes() == struct.pack("<I", 7)
    with pytest.raises(patch.SameFile):
        patch.apply_file(src, src, [])
    with pytest.raises(patch.OldMismatch):
        patch.apply_file(src, tmp_path / "c.prg", [PatchOp(0, b"\1", b"\7")])
    assert not (tmp_path / "c.prg").exists()


def _chem_args():
    data, _, m = chemical()
    r = analyze(parse_prg(data), None, chemical_db())
    return data, m, r


def test_kp_literal_pool_patch():
    data, m, r = _chem_args()
    args = next(a for a in r.args if a["KP"].decoded == 1.5)
    ops = patch_argument(r.binary, args, "KP", 1.56)
    assert len(ops) == 1 and len(ops[0].new) == 4
    caller = r.binary.find(args.callsite.caller)
    assert caller.end <= ops[0].offset < caller.pool_end
    out, chk, raw = apply(data, ops)
    r2 = analyze(parse_prg(out), None, chemical_db())
    kp = next(a for a in r2.args if a.callsite.dispatch_pc == args.callsite.dispatch_pc)["KP"]
    assert kp.raw == struct.unpack("<I", struct.pack("<f", 1.56))[0]
    assert compute_chk(out) == chk == struct.unpack("<I", raw)[0]


def test_kp_global_patch_is_one_word_in_global_init():
    data, m, r = _chem_args()
    glob = {g["literal_offset"] for g in m.globals}
    args = next(a for a in r.args if a["KP"].provenance in glob)
    ops = patch_argument(r.binary, args, "KP", 0.9)
    assert [(op.offset, len(op.new)) for op in ops] == [(args["KP"].provenance, 4)]
    gi = r.binary.subroutines[0]
    assert gi.end <= ops[0].offset < gi.pool_end


def test_computed_value_not_patchable():
    data, m, r = _chem_args()
    computed = [(a, p) for a in r.args for p in a.params if p.provenance is None]
    assert computed
    a, p = computed[0]
    with pytest.raises(patch.ValueNotPatchable):
        patch_argument(r.binary, a, p.name, 1.0)


def test_data_patch_preserves_structure():
    data, _ = pid_binary(4)
    r = analyze(parse_prg(data), None, chemical_db())
    ops = patch_argument(r.binary, r.args[0], "KP", r.args[0]["KP"].decoded + 0.25)
    out, _, _ = apply(data, ops)
    before, after = parse_prg(data), parse_prg(out)
    assert [(s.start, s.end, s.pool_end) for s in before.subroutines] == \
        [(s.start, s.end, s.pool_end) for s in after.subroutines]
    assert build_cfg(before, recover_call_table(before)).edge_map() == \
        build_cfg(after, recover_call_table(after)).edge_map()
