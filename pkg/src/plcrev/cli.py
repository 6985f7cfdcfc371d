"""Command-line entry point."""

import argparse
import json
import logging
import sys
from pathlib import Path

from . import bench, forge, knowledge, patch, report
from .analysis import analyze
from .armdec import format_listing_line
from .binfmt import load_prg
from .emulator import RunConfig, run
from .errors import PlcrevError
from .knowledge import FingerprintDb, TrgKey, build_db, fingerprint, trg_decode, trg_recover_key
from .project import Project, ProjectError, from_analysis, load_config

log = logging.getLogger("plcrev")


def _int(text: str) -> int:
    try:
        return int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None


def _hex(v) -> str:
    return f"{v:#x}" if isinstance(v, int) else str(v)


# --------------------------------------------------------------------------
# shared loading


def _settings(args) -> dict:
    cfg = load_config(args.config)
    return {
        "iomap": getattr(args, "iomap", None) or cfg.iomap,
        "db": getattr(args, "db", None) or cfg.db,
        "image_base": cfg.image_base if getattr(args, "image_base", None) is None else args.image_base,
        "dispatch_base": cfg.dispatch_base if getattr(args, "dispatch_base", None) is None else args.dispatch_base,
    }


def _load_db(path):
    return FingerprintDb.load(path) if path else None


def is_project(path) -> bool:
    try:
        with open(path, "rb") as fh:
            head = fh.read(64)
    except OSError:
        return False
    return head.lstrip().startswith(b"{")


def run_analysis(path, settings: dict):
    binary = load_prg(path)
    return analyze(binary, knowledge.builtin_or_file(settings["iomap"]), _load_db(settings["db"]),
                   settings["image_base"], settings["dispatch_base"])


def open_target(path):
    """(project or None, binary) for a project file or a raw PRG."""
    if is_project(path):
        proj = Project.load(path)
        return proj, proj.binary()
    return None, load_prg(path)


def print_summary(result, out=None) -> None:
    out = out or sys.stdout
    s = result.summary()
    print(f"subroutines {s['subroutines']}", file=out)
    print(f"edges {s['edges']}", file=out)
    print(f"unresolved {s['unresolved']}", file=out)
    print(f"matches {len(s['matches'])}" + (f" ({', '.join(s['matches'])})" if s["matches"] else ""), file=out)
    print(f"io reads {s['io_reads']} writes {s['io_writes']}", file=out)
    for err in result.errors:
        print(f"warning: {err.render()}", file=out)


# --------------------------------------------------------------------------
# commands


def cmd_analyze(args) -> int:
    settings = _settings(args)
    result = run_analysis(args.prg, settings)
    proj = from_analysis(result, Path(args.prg))
    out = args.output or str(args.prg) + ".project.json"
    proj.save(out)
    if args.json:
        print(json.dumps(proj.result["summary"], sort_keys=True))
    else:
        print_summary(result)
        print(f"project {out}")
    return 0


def cmd_graph(args) -> int:
    proj = Project.load(args.project)
    prefix = (args.html.rstrip("/") + "/") if args.html else "html/"
    if args.html and args.output:
        # links in the DOT file are relative to its own directory
        try:
            prefix = str(Path(args.html).resolve().relative_to(Path(args.output).resolve().parent)) + "/"
        except ValueError:
            prefix = str(Path(args.html).resolve()) + "/"
    dot = report.graph_dot(proj.result["graph"], prefix, proj.annotations["renames"])
    if args.output:
        Path(args.output).write_text(dot)
    else:
        sys.stdout.write(dot)
    if args.html:
        pages = report.write_html(proj.binary(), proj.result, args.html, proj.annotations["renames"],
                                  proj.annotations["notes"])
        print(f"wrote {len(pages)} pages to {args.html}", file=sys.stderr)
    return 0


def cmd_disasm(args) -> int:
    _, binary = open_target(args.target)
    binary.decode()
    subs = [binary.find(args.sub)] if args.sub else binary.subroutines
    for sub in subs:
        print(f"; {sub.name} {sub.start:#x}-{sub.end:#x} pool {sub.end:#x}-{sub.pool_end:#x} {sub.role.value}")
        for ins in sub.instrs:
            print(format_listing_line(ins))
    return 0


def _arg_rows(entries: list) -> list:
    rows = []
    for a in entries:
        rows.append(f"call {a['dispatch_pc']:#x} from {_hex(a['caller'])} {a['function']} base {a['base']:#x}")
        for p in a["params"]:
            prov = f"{p['provenance']:#x}" if p["provenance"] is not None else "-"
            rows.append(f"  {p['name']:<10} {p['type']:<7} {p['raw']:#010x} {p['decoded']!r:<24} literal {prov}")
    return rows


def cmd_args(args) -> int:
    proj = Project.load(args.project)
    entries = proj.result.get("arguments", [])
    if args.callsite is not None:
        entries = [a for a in entries if a["dispatch_pc"] == args.callsite]
        if not entries:
            raise ProjectError(f"no extracted arguments at call site {args.callsite:#x}")
    if args.json:
        print(json.dumps(entries, indent=1, sort_keys=True))
    else:
        for row in _arg_rows(entries):
            print(row)
    return 0


def cmd_patch(args) -> int:
    src = args.source
    if args.script:
        ops = patch.load_script(Path(args.script).read_text())
        prg_path = Project.load(src).source if is_project(src) else src
    else:
        if args.callsite is None or args.param is None or (args.value is None and args.add is None):
            raise PlcrevError("argument patching needs --callsite, --param and --value or --add")
        if is_project(src):
            proj = Project.load(src)
            prg_path, cfg = proj.source, proj.config
            settings = _settings(args)
            settings.update(image_base=cfg.get("image_base", 0), dispatch_base=cfg.get("dispatch_base", 0))
        else:
            prg_path, settings = src, _settings(args)
        if not settings["db"]:
            raise PlcrevError("argument patching needs a fingerprint database (--db or config)")
        result = run_analysis(prg_path, settings)
        hits = [a for a in result.args if a.callsite.dispatch_pc == args.callsite]
        if not hits:
            raise PlcrevError(f"no extracted arguments at call site {args.callsite:#x}")
        current = hits[0][args.param].decoded
        value = args.value if args.value is not None else current + args.add
        ops = patch.patch_argument(result.binary, hits[0], args.param, value)
    if args.emit_script:
        Path(args.emit_script).write_text(patch.dump_script(ops))
    chk = patch.apply_file(prg_path, args.output, ops, args.chk)
    for op in ops:
        print(f"{op.offset:#x}: {op.old.hex()} -> {op.new.hex()}  {op.reason}")
    print(f"chk {chk:#010x}")
    return 0


def cmd_chk(args) -> int:
    data = Path(args.prg).read_bytes()
    value = patch.compute_chk(data)
    if args.output:
        Path(args.output).write_bytes(patch.chk_bytes(value))
    print(f"{value:#010x}")
    if args.verify:
        stored = patch.read_chk(Path(args.verify).read_bytes())
        if stored != value:
            print(f"mismatch: {args.verify} holds {stored:#010x}", file=sys.stderr)
            return 1
        print("ok")
    return 0


def cmd_trg(args) -> int:
    if args.trg_cmd == "recover-key":
        key = trg_recover_key(Path(args.cipher).read_bytes(), Path(args.plain).read_bytes())
        Path(args.output).write_bytes(key.key)
        print(f"wrote {len(key.key)}-byte key to {args.output}")
        return 0
    key = TrgKey.load(args.key)
    out = trg_decode(Path(args.input).read_bytes(), key)
    if args.output:
        Path(args.output).write_bytes(out)
    else:
        sys.stdout.buffer.write(out)
    return 0


def _corpus_items(directory: Path):
    for prg in sorted(directory.glob("*.prg")):
        mpath = prg.with_suffix(".manifest.json")
        name, library = prg.stem, ""
        if mpath.is_file():
            m = forge.Manifest.load(mpath)
            name = m.name
            library = next((lib["library"] for lib in m.libraries if lib["name"] == name), "")
        yield load_prg(prg), name, library


def cmd_db(args) -> int:
    if args.db_cmd == "build":
        db = FingerprintDb.load(args.output) if args.append and Path(args.output).is_file() else FingerprintDb()
        collisions = []
        n = 0
        for item in _corpus_items(Path(args.corpus)):
            n += 1
            try:
                build_db([item], db)
            except knowledge.CollisionDetected as exc:
                collisions.append(exc)
                print(f"collision: {exc}", file=sys.stderr)
        db.save(args.output)
        print(f"{len(db)} fingerprints from {n} binaries, {len(collisions)} collisions")
        return 1 if collisions else 0
    db = FingerprintDb.load(args.db)
    if Path(args.target).is_file():
        binary = load_prg(args.target).decode()
        for sub in binary.subroutines:
            try:
                digest = fingerprint(sub)
            except knowledge.EmptyBody:
                continue
            hit = db.lookup(digest)
            print(f"{sub.start:#x} {sub.name:<14} {digest[:16]} {hit.name if hit else '-'}")
        return 0
    hit = db.lookup(args.target.lower())
    if hit is None:
        print("no match")
        return 1
    print(f"{hit.name} ({hit.library}) {hit.mnemonic_count} instructions")
    return 0


PRESETS = {"minimal": forge.minimal_spec, "chemical": forge.chemical_process_spec}


def _write_forged(path: Path, data, chk, manifest) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    path.with_suffix(".chk").write_bytes(chk)
    manifest.save(path.with_suffix(".manifest.json"))


def cmd_forge(args) -> int:
    import random
    if args.forge_cmd == "generate":
        if args.preset == "random":
            spec = forge.random_spec(random.Random(args.seed), args.size_kb, Path(args.output).stem)
        else:
            spec = PRESETS[args.preset](args.seed)
            if args.size_kb:
                spec.size_target = args.size_kb
        data, chk, manifest = forge.generate(spec)
        _write_forged(Path(args.output), data, chk, manifest)
        print(f"{args.output} {len(data)} bytes chk {manifest.chk:#010x}")
    elif args.forge_cmd == "corpus":
        items = forge.generate_corpus(args.count, args.seed, args.output, args.min_kb, args.max_kb)
        print(f"{len(items)} binaries, {sum(len(i[1]) for i in items)} bytes in {args.output}")
    else:
        libs = list(forge.chemical_libraries().values()) if args.chemical else []
        libs += forge.library_catalogue(args.count, args.seed)
        by_name = {lib.name: lib for lib in libs}
        out = Path(args.output)
        for i, lib in enumerate(libs):
            deps = [by_name[c] for c in sorted(lib.calls)]
            data, chk, manifest = forge.generate(forge.library_binary_spec(lib, deps, seed=args.seed + i))
            _write_forged(out / f"{lib.name}.prg", data, chk, manifest)
        print(f"{len(libs)} library binaries in {out}")
    return 0


def cmd_trace(args) -> int:
    _, binary = open_target(args.target)
    binary.decode()
    entry = binary.find(args.entry).start if args.entry else binary.header.entry_point()
    halt = set(args.halt_at or ())
    cfg = RunConfig(entry, halt_at=halt, step_budget=args.budget, image_base=args.image_base or 0)
    state, trace, reason = run(binary, cfg)
    text = trace.to_jsonl()
    if args.output:
        Path(args.output).write_text(text)
    else:
        sys.stdout.write(text)
    print(f"halt {reason.value} after {state.step_count} steps, pc {state.regs[15]:#x}", file=sys.stderr)
    return 0


def cmd_shell(args) -> int:
    from .shell import Shell
    sh = Shell(config=_settings(args))
    if args.project:
        sh.onecmd(f"open {args.project}")
    sh.cmdloop()
    return 0


def cmd_bench(args) -> int:
    def progress(s):
        print(f"{s.size_kb:>5} KB  {s.size:>8} bytes  {s.subroutines:>5} subs  {s.seconds:8.3f} s", file=sys.stderr)
    samples = bench.run(args.sizes, args.seed, progress)
    csv_path, png_path, line = bench.report(samples, args.output)
    print("size_kb,size_bytes,subroutines,edges,seconds")
    for s in samples:
        print(f"{s.size_kb},{s.size},{s.subroutines},{s.edges},{s.seconds:.6f}")
    print(f"# slope {line.slope * 1024 * 1024:.3f} s/MB  intercept {line.intercept:.3f} s  R2 {line.r2:.4f}")
    print(f"# wrote {csv_path} and {png_path}")
    return 0


# --------------------------------------------------------------------------
# parser


def _sizes(text: str) -> list:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad size list {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="plcrev", description="Reverse-engineering toolkit for PRG binaries.")
    p.add_argument("--config", help="config file (default $PLCREV_CONFIG or ~/.config/plcrev/config.ini)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def analysis_opts(sp):
        sp.add_argument("--iomap", help="builtin I/O map name or map file")
        sp.add_argument("--db", help="fingerprint database JSON")
        sp.add_argument("--image-base", type=_int)
        sp.add_argument("--dispatch-base", type=_int)

    sp = sub.add_parser("analyze", help="analyze a PRG binary and save a project")
    sp.add_argument("prg")
    sp.add_argument("-o", "--output", help="project path (default <prg>.project.json)")
    sp.add_argument("--json", action="store_true", help="print the summary as JSON")
    analysis_opts(sp)
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("graph", help="emit a DOT call graph and optional HTML report")
    sp.add_argument("project")
    sp.add_argument("-o", "--output", help="DOT file (default stdout)")
    sp.add_argument("--html", help="directory for the HTML report")
    sp.set_defaults(func=cmd_graph)

    sp = sub.add_parser("disasm", help="disassembly listing")
    sp.add_argument("target", help="project or PRG file")
    sp.add_argument("--sub", help="subroutine name or address")
    sp.set_defaults(func=cmd_disasm)

    sp = sub.add_parser("args", help="extracted call arguments")
    sp.add_argument("project")
    sp.add_argument("--callsite", type=_int, help="dispatch pc of the call")
    sp.add_argument("--json", action="store_true")
    sp.set_defaults(func=cmd_args)

    sp = sub.add_parser("patch", help="write a patched copy and its CHK file")
    sp.add_argument("source", help="project or PRG file")
    sp.add_argument("-o", "--output", required=True)
    sp.add_argument("--chk", help="CHK output path (default <output>.chk)")
    sp.add_argument("--script", help="JSON patch script")
    sp.add_argument("--callsite", type=_int)
    sp.add_argument("--param")
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--value", type=float)
    g.add_argument("--add", type=float, help="add this to the current value")
    sp.add_argument("--emit-script", help="also save the generated ops as a patch script")
    analysis_opts(sp)
    sp.set_defaults(func=cmd_patch)

    sp = sub.add_parser("chk", help="compute or verify a CHK checksum")
    sp.add_argument("prg")
    sp.add_argument("-o", "--output", help="write the CHK file")
    sp.add_argument("--verify", help="compare with an existing CHK file")
    sp.set_defaults(func=cmd_chk)

    sp = sub.add_parser("trg", help="TRG XOR codec")
    tsub = sp.add_subparsers(dest="trg_cmd", required=True)
    for verb in ("decode", "encode"):
        t = tsub.add_parser(verb)
        t.add_argument("input")
        t.add_argument("key", help="256-byte key file")
        t.add_argument("-o", "--output")
    t = tsub.add_parser("recover-key")
    t.add_argument("cipher")
    t.add_argument("plain")
    t.add_argument("-o", "--output", default="trg.key")
    sp.set_defaults(func=cmd_trg)

    sp = sub.add_parser("db", help="fingerprint database")
    dsub = sp.add_subparsers(dest="db_cmd", required=True)
    d = dsub.add_parser("build", help="fingerprint library binaries in a directory")
    d.add_argument("corpus")
    d.add_argument("-o", "--output", default="fingerprints.json")
    d.add_argument("--append", action="store_true", help="extend an existing database")
    d = dsub.add_parser("lookup", help="look up a digest or every subroutine of a PRG")
    d.add_argument("db")
    d.add_argument("target")
    sp.set_defaults(func=cmd_db)

    sp = sub.add_parser("forge", help="generate ground-truth binaries")
    fsub = sp.add_subparsers(dest="forge_cmd", required=True)
    f = fsub.add_parser("generate")
    f.add_argument("-o", "--output", required=True)
    f.add_argument("--preset", choices=("minimal", "chemical", "random"), default="minimal")
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--size-kb", type=int)
    f = fsub.add_parser("corpus")
    f.add_argument("count", type=int)
    f.add_argument("-o", "--output", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--min-kb", type=int, default=4)
    f.add_argument("--max-kb", type=int, default=550)
    f = fsub.add_parser("libraries", help="one binary per catalogue library, for db build")
    f.add_argument("count", type=int)
    f.add_argument("-o", "--output", required=True)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--chemical", action="store_true", help="include the PID family")
    sp.set_defaults(func=cmd_forge)

    sp = sub.add_parser("trace", help="emulate and dump memory accesses as JSON lines")
    sp.add_argument("target", help="project or PRG file")
    sp.add_argument("--entry", help="subroutine name or address (default entry point)")
    sp.add_argument("--halt-at", type=_int, action="append")
    sp.add_argument("--budget", type=int, default=10_000_000)
    sp.add_argument("--image-base", type=_int)
    sp.add_argument("-o", "--output")
    sp.set_defaults(func=cmd_trace)

    sp = sub.add_parser("shell", help="interactive session")
    sp.add_argument("project", nargs="?")
    analysis_opts(sp)
    sp.set_defaults(func=cmd_shell)

    sp = sub.add_parser("bench", help="time analysis against size; writes CSV and PNG")
    sp.add_argument("-o", "--output", default="bench")
    sp.add_argument("--sizes", type=_sizes, default=list(bench.DEFAULT_SIZES), help="comma-separated KB sizes")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except PlcrevError as exc:
        where = getattr(args, "prg", None) or getattr(args, "target", None) or getattr(args, "project", None)
        print(f"error: {where + ': ' if where else ''}{exc.render()}", file=sys.stderr)
        return 1
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
