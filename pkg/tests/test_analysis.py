import random

import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from plcrev import analysis, forge
from plcrev.analysis import analyze, build_cfg, extract_args, find_call_sites, match_known
from plcrev.binfmt import Role, parse_prg
from plcrev.emulator import recover_call_table
from plcrev.knowledge import PID_FIXCYCLE, WAGO_750_881, build_db, make_iomap

from forgekit import chemical, chemical_db, library_binaries, pid_binary
from prgkit import TABLE, build_with_table, dispatch, stub


def _plc(body, pool, symbols=()):
    """Seven-subroutine binary whose PLC_PRG is ``body``; returns (binary, starts)."""
    bodies = [stub() for _ in range(5)] + [(body, pool)]
    data, starts = build_with_table(bodies, symbols)
    return parse_prg(data).decode(), starts


def test_two_planted_calls_become_call_sites():
    data, _, m = chemical()
    prg = parse_prg(data).decode()
    plc = prg.find("PLC_PRG")
    sites = find_call_sites(plc)
    planted = [c for c in m.call_sites if c["caller"] == plc.start]
    assert [(s.dispatch_pc, s.sub_offset) for s in sites] == [(c["dispatch_pc"], c["sub_offset"]) for c in planted]
    assert find_call_sites(prg.subroutines[1]) == []


@pytest.mark.parametrize("ri", [4, 7, 12])
def test_any_register_dispatch(ri):
    prg, starts = _plc(dispatch(ri, 0), [TABLE + 8])
    sites = find_call_sites(prg.subroutines[5])
    assert len(sites) == 1 and sites[0].reg == ri
    g = build_cfg(prg, recover_call_table(prg))
    assert g.edge_map() == {(starts[5], starts[2], "static"): 1}


def test_partial_dispatch_is_reported_not_fatal():
    body = dispatch(4, 0)
    del body[6]  # drop the nop
    prg, _ = _plc(body + dispatch(5, 1), [TABLE + 4, TABLE + 8])
    errors = []
    sites = find_call_sites(prg.subroutines[5], errors)
    assert len(sites) == 1 and sites[0].reg == 5
    assert len(errors) == 1 and isinstance(errors[0], analysis.MalformedDispatch)


def test_dynamic_edge_and_count_aggregation():
    sym = [("real_add", 0x82), ("real_sub", 0x83)]
    body = dispatch(4, 0) + dispatch(4, 1) + dispatch(6, 0)
    prg, starts = _plc(body, [0x82 * 4 + 8, 0x83 * 4 + 8], sym)
    g = build_cfg(prg, recover_call_table(prg))
    assert g.named_edges() == {("PLC_PRG", "real_add", "dynamic"): 2, ("PLC_PRG", "real_sub", "dynamic"): 1}


def test_dispatch_base_shifts_jump_offsets():
    prg, _ = _plc(dispatch(4, 0), [0x1000 + 0x82 * 4 + 8], [("real_add", 0x82)])
    table = recover_call_table(prg)
    assert build_cfg(prg, table, dispatch_base=0x1000).named_edges() == {("PLC_PRG", "real_add", "dynamic"): 1}
    errors = []
    g = build_cfg(prg, table, errors=errors)
    assert len(g.unresolved) == 1 and isinstance(errors[0], analysis.UnresolvedTarget)


def test_direct_branch_into_other_subroutine():
    # every stub is 20 bytes, so the third subroutine starts at 0x78
    prg, starts = _plc(["bl #0x78"], [])
    assert starts[2] == 0x78
    g = build_cfg(prg, recover_call_table(prg))
    assert (starts[5], starts[2], "static") in g.edge_map()


def test_minimal_has_no_plc_prg_edges():
    data, _, _ = forge.generate(forge.minimal_spec())
    r = analyze(parse_prg(data), WAGO_750_881)
    plc = r.binary.find("PLC_PRG").start
    assert r.graph.out_edges(plc) == []
    assert len(r.graph.nodes) == 7
    assert not r.errors


def test_chemical_edges():
    data, _, m = chemical()
    r = analyze(parse_prg(data), WAGO_750_881, chemical_db())
    assert r.graph.named_edges() == {
        ("PLC_PRG", "PID_FIXCYCLE", "static"): 2,
        ("PID_FIXCYCLE", "DERIVATIVE", "static"): 1,
        ("PID_FIXCYCLE", "INTEGRAL", "static"): 2,
        ("PLC_PRG", "R_TRIG", "static"): 1,
    }
    assert r.graph.edge_map() == m.edge_map()
    assert not r.errors


def test_io_annotation():
    data, _, m = chemical()
    r = analyze(parse_prg(data), WAGO_750_881)
    got = {a.key for n in r.graph.sub_nodes() for a in n.io_reads + n.io_writes}
    assert got == m.io_set()
    plc = r.graph.nodes[r.binary.find("PLC_PRG").start]
    assert any(a.addr == 0x28CFEC04 and a.kind == "read" for a in plc.io_reads)
    assert any(a.addr == 0x28CFD800 and a.kind == "write" for a in plc.io_writes)
    # the guarded write sits on a branch not taken from zeroed state
    guarded = [a for a in plc.io_writes if a.addr == 0x28CFD804]
    assert guarded and guarded[0].source == "static"


def test_io_outside_ranges_not_annotated():
    body = ["ldr r1, [pc, #{pool:0}]", "ldr r0, [r1]", "ldr r2, [pc, #{pool:1}]", "ldr r0, [r2]",
            "ldr r3, [pc, #{pool:2}]", "str r0, [r3]", "ldr r3, [pc, #{pool:3}]", "str r0, [r3]"]
    prg, _ = _plc(body, [0x10000000, 0x28CFEC04, 0x28CFEC00 - 4, 0x28CFE3F8])
    r = analyze(prg, WAGO_750_881)
    node = r.graph.nodes[prg.subroutines[5].start]
    assert [(a.kind, a.addr) for a in node.io_reads] == [("read", 0x28CFEC04)]
    assert [(a.kind, a.addr) for a in node.io_writes] == [("write", 0x28CFE3F8)]
    other = make_iomap("other", [(0x10000000, 0x10000010)], [])
    r = analyze(prg, other)
    assert [a.addr for a in r.graph.nodes[prg.subroutines[5].start].io_reads] == [0x10000000]


def test_match_known_renames_and_is_idempotent():
    data, _, m = chemical()
    prg = parse_prg(data)
    r = analyze(prg, None, chemical_db(), extract=False)
    names = {n.matched_name for n in r.graph.sub_nodes() if n.matched_name}
    assert {"PID_FIXCYCLE", "DERIVATIVE", "INTEGRAL", "R_TRIG"} <= names
    pid = prg.find(m.start_of("PID_FIXCYCLE"))
    assert pid.role == Role.LibMain
    again = match_known(prg, chemical_db(), r.graph)
    assert again == match_known(prg, chemical_db())


def test_match_survives_relocation_and_register_renaming():
    libs = forge.library_catalogue(8, 21)
    db = build_db(library_binaries(libs))
    for prg, name, _ in library_binaries(libs, seed=99, perm_seed=5, pad=3):
        hits = match_known(prg, db)
        main = prg.subroutines[-4]
        assert hits.get(main.start) == name
        assert hits.get(prg.subroutines[-3].start) == name + "_INIT"


def _by_pc(args):
    return {a.callsite.dispatch_pc: a for a in args}


def _check_against_manifest(r, m):
    got = _by_pc(r.args)
    assert sorted(got) == sorted(p["dispatch_pc"] for p in m.pid_calls)
    for planted in m.pid_calls:
        a = got[planted["dispatch_pc"]]
        assert a.base == planted["instance"]
        for p, want in zip(a.params, planted["params"]):
            assert (p.name, p.type, p.raw) == (want["name"], want["type"], want["raw"])
            assert p.provenance == want["literal_offset"]


def test_chemical_pid_arguments():
    data, _, m = chemical()
    r = analyze(parse_prg(data), WAGO_750_881, chemical_db())
    _check_against_manifest(r, m)
    kp = {a.callsite.dispatch_pc: a["KP"] for a in r.args}
    assert sorted(v.decoded for v in kp.values()) == [pytest.approx(0.8), 1.5]
    literal = next(v for v in kp.values() if v.decoded == 1.5)
    assert literal.raw == 0x3FC00000


def test_kp_from_global_equals_global():
    data, _, m = chemical()
    r = analyze(parse_prg(data), None, chemical_db())
    glob = {g["literal_offset"]: g["value"] for g in m.globals}
    kp = [a["KP"] for a in r.args if a["KP"].provenance in glob]
    assert len(kp) == 1 and kp[0].raw == glob[kp[0].provenance]
    gi = r.binary.subroutines[0]
    assert gi.end <= kp[0].provenance < gi.pool_end


@pytest.mark.parametrize("seed", range(6))
def test_pid_extraction_random(seed):
    data, m = pid_binary(seed)
    _check_against_manifest(analyze(parse_prg(data), None, chemical_db()), m)


def test_zero_instance_decodes_to_zero():
    # r0 points at memory nobody wrote
    body = ["ldr r0, [pc, #{pool:1}]"] + dispatch(4, 0)
    prg, _ = _plc(body, [TABLE + 8, 0x00900000])
    site = find_call_sites(prg.subroutines[5])[0]
    args = extract_args(prg, site, PID_FIXCYCLE)
    assert args.base == 0x00900000
    assert all(p.decoded in (0, 0.0, False) for p in args.params)
    assert all(p.provenance is None for p in args.params)


def test_no_layout():
    prg, _ = _plc(dispatch(4, 0), [TABLE + 8])
    site = find_call_sites(prg.subroutines[5])[0]
    with pytest.raises(analysis.NoLayout):
        extract_args(prg, site, None)


def test_analysis_deterministic():
    data, _, _ = chemical()
    a = analyze(parse_prg(data), WAGO_750_881, chemical_db()).to_dict()
    b = analyze(parse_prg(data), WAGO_750_881, chemical_db()).to_dict()
    assert a == b


@settings(max_examples=12, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.integers(0, 2**32 - 1))
def test_cfg_and_io_match_manifest(seed):
    data, _, m = forge.generate(forge.random_spec(random.Random(seed), 24))
    r = analyze(parse_prg(data), WAGO_750_881)
    assert r.calltable.slots == m.call_table
    assert r.graph.edge_map() == m.edge_map()
    assert not r.graph.unresolved
    assert {a.key for n in r.graph.sub_nodes() for a in n.io_reads + n.io_writes} == m.io_set()
