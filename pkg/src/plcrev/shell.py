"""Interactive analysis session."""

import cmd
import shlex
from pathlib import Path

from . import patch, report
from .armdec import format_listing_line
from .errors import PlcrevError
from .project import Project, ProjectError, from_analysis


def _int(text: str) -> int:
    return int(text, 0)


class Shell(cmd.Cmd):
    intro = "plcrev shell; type help or ? to list commands."
    prompt = "plcrev> "

    def __init__(self, config: dict = None, stdin=None, stdout=None):
        super().__init__(stdin=stdin, stdout=stdout)
        if stdin is not None:
            self.use_rawinput = False
        self.config = config or {"iomap": None, "db": None, "image_base": 0, "dispatch_base": 0}
        self.project = None
        self.project_path = None
        self.binary = None
        self.dirty = False

    def say(self, text: str = "") -> None:
        self.stdout.write(text + "\n")

    def onecmd(self, line):
        try:
            return super().onecmd(line)
        except (PlcrevError, OSError, ValueError, KeyError) as exc:
            self.say(f"error: {exc.render() if isinstance(exc, PlcrevError) else exc}")
            return False

    def emptyline(self):
        return False

    def _need(self) -> Project:
        if self.project is None:
            raise ProjectError("no project open; use open or analyze")
        return self.project

    # session

    def do_open(self, arg):
        """open PROJECT : load a saved project (the source binary must be unchanged)"""
        path = arg.strip()
        self.project = Project.load(path)
        self.project_path = path
        self.binary = self.project.binary().decode()
        self.dirty = False
        self.say(f"opened {path}: {len(self.binary.subroutines)} subroutines")

    def do_analyze(self, arg):
        """analyze PRG : analyze a binary with the session configuration"""
        from .cli import print_summary, run_analysis
        path = arg.strip()
        result = run_analysis(path, self.config)
        self.project = from_analysis(result, Path(path))
        self.project_path = path + ".project.json"
        self.binary = result.binary
        self.dirty = True
        print_summary(result, self.stdout)

    def do_save(self, arg):
        """save [PATH] : write the project (default: where it was opened)"""
        proj = self._need()
        path = arg.strip() or self.project_path
        proj.save(path)
        self.project_path = path
        self.dirty = False
        self.say(f"saved {path}")

    def do_info(self, arg):
        """info : summary of the open project"""
        proj = self._need()
        self.say(f"source {proj.source}")
        self.say(f"sha256 {proj.sha256}")
        for k, v in sorted(proj.result["summary"].items()):
            self.say(f"{k} {v}")

    # browsing

    def do_subs(self, arg):
        """subs : list subroutines"""
        proj = self._need()
        for s in proj.result["subroutines"]:
            self.say(f"{s['start']:#08x}-{s['end']:#08x} {proj.label(s['start']):<20} {s['role']}")

    def do_disasm(self, arg):
        """disasm NAME|ADDR : listing of one subroutine"""
        proj = self._need()
        key = proj.resolve(arg.strip())
        sub = self.binary.find(key)
        self.say(f"; {proj.label(key)}")
        note = proj.annotations["notes"].get(str(key))
        if note:
            self.say(f"; {note}")
        for ins in sub.instrs:
            self.say(format_listing_line(ins))

    def do_xrefs(self, arg):
        """xrefs NAME|ADDR : callers and callees"""
        proj = self._need()
        key = proj.resolve(arg.strip())
        for e in proj.result["graph"]["edges"]:
            if e["caller"] == key:
                self.say(f"calls     {proj.label(e['callee'])} {e['kind']} x{e['count']}")
        for e in proj.result["graph"]["edges"]:
            if e["callee"] == key:
                self.say(f"called by {proj.label(e['caller'])} x{e['count']}")

    def do_io(self, arg):
        """io : annotated I/O accesses"""
        proj = self._need()
        for n in proj.result["graph"]["nodes"]:
            for a in n.get("io_reads", []) + n.get("io_writes", []):
                self.say(f"{a['pc']:#x} {proj.label(n['key']):<20} {a['kind']:<5} {a['addr']:#x}")

    def do_args(self, arg):
        """args [CALLSITE] : extracted call arguments"""
        from .cli import _arg_rows
        proj = self._need()
        entries = proj.result.get("arguments", [])
        if arg.strip():
            pc = _int(arg.strip())
            entries = [a for a in entries if a["dispatch_pc"] == pc]
        for row in _arg_rows(entries):
            self.say(row)

    # annotations

    def do_rename(self, arg):
        """rename NAME|ADDR NEWNAME"""
        proj = self._need()
        ref, new = shlex.split(arg)
        proj.annotations["renames"][str(proj.resolve(ref))] = new
        self.dirty = True

    def do_note(self, arg):
        """note NAME|ADDR TEXT"""
        proj = self._need()
        ref, _, text = arg.strip().partition(" ")
        proj.annotations["notes"][str(proj.resolve(ref))] = text.strip()
        self.dirty = True

    # output

    def do_graph(self, arg):
        """graph OUT.dot [HTMLDIR] : DOT call graph and optional HTML report"""
        proj = self._need()
        parts = shlex.split(arg)
        html_dir = parts[1] if len(parts) > 1 else None
        prefix = (html_dir.rstrip("/") + "/") if html_dir else "html/"
        Path(parts[0]).write_text(report.graph_dot(proj.result["graph"], prefix, proj.annotations["renames"]))
        if html_dir:
            report.write_html(self.binary, proj.result, html_dir, proj.annotations["renames"],
                              proj.annotations["notes"])
        self.say(f"wrote {parts[0]}")

    def do_patch(self, arg):
        """patch CALLSITE PARAM VALUE OUT : patch one extracted argument into a copy"""
        from .cli import run_analysis
        proj = self._need()
        pc, param, value, out = shlex.split(arg)
        if not self.config.get("db"):
            raise ProjectError("no fingerprint database configured")
        settings = dict(self.config, image_base=proj.config.get("image_base", 0),
                        dispatch_base=proj.config.get("dispatch_base", 0))
        result = run_analysis(proj.source, settings)
        hits = [a for a in result.args if a.callsite.dispatch_pc == _int(pc)]
        if not hits:
            raise ProjectError(f"no extracted arguments at {_int(pc):#x}")
        ops = patch.patch_argument(result.binary, hits[0], param, float(value))
        chk = patch.apply_file(proj.source, out, ops)
        self.say(f"wrote {out} chk {chk:#010x}")

    def do_quit(self, arg):
        """quit : leave the shell"""
        if self.dirty:
            self.say("unsaved changes discarded")
        return True

    do_exit = do_quit

    def do_EOF(self, arg):
        self.say()
        return self.do_quit(arg)
