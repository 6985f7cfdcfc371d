import random
import struct

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from plcrev import forge
from plcrev.binfmt import Role, parse_prg
from plcrev.emulator import recover_call_table


def test_minimal_spec_shape():
    data, chk, m = forge.generate(forge.minimal_spec())
    prg = parse_prg(data)
    assert len(prg.subroutines) == 7
    assert prg.symbols == []
    assert [s.role for s in prg.subroutines] == [Role.GlobalInit, Role.Support, Role.Support, Role.Support,
                                                Role.SysDebug, Role.PlcPrg, Role.MemoryInit]
    assert not [e for e in m.edges if e["caller"] == m.start_of("PLC_PRG")]
    assert struct.unpack("<I", chk)[0] == sum(data) & 0xFFFFFFFF == m.chk


def test_seed_determinism():
    spec = lambda: forge.random_spec(random.Random(9), 40)
    assert forge.generate(spec())[0] == forge.generate(spec())[0]
    assert forge.generate(forge.chemical_process_spec())[0] == forge.generate(forge.chemical_process_spec())[0]


def test_corpus_determinism(tmp_path):
    a = forge.generate_corpus(4, 17, tmp_path / "a", hi_kb=40)
    b = forge.generate_corpus(4, 17, None, hi_kb=40)
    assert [x[1] for x in a] == [x[1] for x in b]
    assert sorted(p.name for p in (tmp_path / "a").iterdir())[:3] == [
        "prg_000.chk", "prg_000.manifest.json", "prg_000.prg"]
    m = forge.Manifest.load(tmp_path / "a" / "prg_001.manifest.json")
    assert m == a[1][3]


def test_corpus_sizes_cover_extremes():
    sizes = forge.corpus_sizes(50, random.Random(1))
    assert sizes[:2] == [4, 550]
    assert all(4 <= s <= 550 for s in sizes)
    assert sorted(sizes)[25] < 100  # skewed toward small programs


@pytest.mark.parametrize("kb", [4, 64, 300])
def test_size_target_reached(kb):
    data, _, m = forge.generate(forge.random_spec(random.Random(kb), kb))
    assert len(data) >= kb * 1024
    assert m.size == len(data)


def test_size_target_2000kb():
    data, _, _ = forge.generate(forge.random_spec(random.Random(2000), 2000))
    assert len(data) >= 2000 * 1024
    parse_prg(data, decode=False)


def test_infeasible_specs():
    with pytest.raises(forge.SpecInfeasible):
        forge.generate(forge.ForgeSpec(table_base=0x100))
    with pytest.raises(forge.SpecInfeasible):
        forge.generate(forge.ForgeSpec(symbols=[("a", 1), ("b", 1)]))
    with pytest.raises(forge.SpecInfeasible):
        forge.generate(forge.ForgeSpec(io_accesses=[forge.IoPlant("PLC_PRG", "read", 0x28CFD800)]))
    with pytest.raises(forge.SpecInfeasible):
        forge.generate_corpus(0, 1)
    lib = forge.make_library("X", calls={"MISSING": 1})
    with pytest.raises(forge.SpecInfeasible):
        forge.generate(forge.ForgeSpec(libs=[lib]))


def test_catalogue_bodies_distinct():
    libs = forge.library_catalogue(300, 2)
    bodies = [b for lib in libs for b in lib.mnemonic_key()]
    bodies += [b for lib in forge.chemical_libraries().values() for b in lib.mnemonic_key()]
    assert len(set(bodies)) == len(bodies)
    assert len({lib.name for lib in libs}) == 300


def test_register_renaming_keeps_mnemonics():
    lib = forge.make_library("R", seed=5)
    renamed = lib.renamed(forge._perm_regs(3))
    assert renamed.mnemonic_key() == lib.mnemonic_key()
    assert renamed.main != lib.main


def test_manifest_json_roundtrip():
    _, _, m = forge.generate(forge.chemical_process_spec())
    assert forge.Manifest.from_json(m.to_json()) == m


@settings(max_examples=25, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2**32 - 1), st.integers(4, 48))
def test_parse_total_on_forge_output(seed, kb):
    data, _, m = forge.generate(forge.random_spec(random.Random(seed), kb))
    prg = parse_prg(data)
    got = [(s.start, s.end, s.pool_end) for s in prg.subroutines]
    assert got == [(s["start"], s["end"], s["pool_end"]) for s in m.subroutines]
    assert [(e.name, e.index) for e in prg.symbols] == [(s["name"], s["index"]) for s in m.symbols]
    assert prg.header.entry_point() == m.subroutines[-1]["start"]
    # the emitted Memory INIT rebuilds exactly the planted call table
    assert recover_call_table(prg).slots == m.call_table
    assert prg.serialize() == data
