"""Call-graph recovery, I/O annotation, known-function matching and argument extraction."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

from .armdec import LR, PC, SP, Imm, Instr, Mem, Reg
from .binfmt import PrgBinary, Subroutine
from .emulator import (CallTable, EmulationFault, HaltReason, IncompleteTable, MachineState,
                       RunConfig, recover_call_table, run, snapshot_globals)
from .errors import PlcrevError
from .knowledge import (AmbiguousMatch, EmptyBody, FingerprintDb, IoMap, ParamLayout,
                        fingerprint, mark_library_roles)

log = logging.getLogger(__name__)

UNKNOWN = "unknown"
SOLO_BUDGET = 2_000_000


class MalformedDispatch(PlcrevError):
    pass


class UnresolvedTarget(PlcrevError):
    pass


class HaltNotReached(PlcrevError):
    pass


class NoLayout(PlcrevError):
    pass


@dataclass
class CallSite:
    caller: int  # subroutine start
    dispatch_pc: int
    reg: int
    sub_offset: int
    literal_addr: int
    kind: str = "unresolved"  # static | dynamic | unresolved
    callee: object = None  # subroutine start or symbol node key

    @property
    def start_pc(self) -> int:
        return self.dispatch_pc - 20

    def to_dict(self) -> dict:
        return {"caller": self.caller, "dispatch_pc": self.dispatch_pc, "reg": f"r{self.reg}",
                "sub_offset": self.sub_offset, "literal_addr": self.literal_addr,
                "kind": self.kind, "callee": self.callee}


def _is_push(ins: Instr, reg: int) -> bool:
    return (ins.op == "str" and ins.cond == 14 and not ins.suffix and ins.operands[0] == Reg(reg)
            and ins.operands[1] == Mem(SP, 4, subtract=True, writeback=True))


def _is_pop(ins: Instr, reg: int) -> bool:
    return (ins.op == "ldr" and ins.cond == 14 and not ins.suffix and ins.operands[0] == Reg(reg)
            and ins.operands[1] == Mem(SP, 4, pre=False))


def _is_mov(ins: Instr, rd: int, rm: int) -> bool:
    return ins.op == "mov" and ins.cond == 14 and not ins.s and ins.operands == (Reg(rd), Reg(rm))


def _dispatch_problem(instrs: list, i: int, ri: int) -> Optional[str]:
    """Why the nine words around the ``mov pc, Ri`` at index i are not a dispatch."""
    if i < 5 or i + 3 >= len(instrs):
        return "sequence truncated by subroutine bounds"
    seq = instrs[i - 5:i + 4]
    checks = (
        (_is_push(seq[0], ri), "missing Ri save"),
        (_is_push(seq[1], LR), "missing lr save"),
        (seq[2].op == "ldr" and seq[2].operands[0] == Reg(ri) and seq[2].literal is not None
         and not seq[2].suffix and seq[2].cond == 14, "missing literal load of SUB_OFFSET"),
        (seq[3].op == "ldr" and seq[3].operands == (Reg(ri), Mem(ri)) and not seq[3].suffix
         and seq[3].cond == 14, "missing slot dereference"),
        (_is_mov(seq[4], LR, PC), "missing mov lr, pc"),
        (seq[6].op == "nop" and seq[6].cond == 14, "missing nop"),
        (_is_pop(seq[7], LR), "missing lr restore"),
        (_is_pop(seq[8], ri), "missing Ri restore"),
    )
    for ok, why in checks:
        if not ok:
            return why
    return None


def find_call_sites(sub: Subroutine, errors: Optional[list] = None) -> list:
    """Match the nine-instruction indirect-call sequence; partial matches go to ``errors``."""
    instrs = sub.instrs
    sites = []
    for i, ins in enumerate(instrs):
        if ins.op != "mov" or ins.error is not None or ins.s:
            continue
        ops = ins.operands
        if ops[0] != Reg(PC) or type(ops[1]) is not Reg or ops[1].n in (LR, PC):
            continue
        ri = ops[1].n
        why = _dispatch_problem(instrs, i, ri)
        if why is not None:
            err = MalformedDispatch(f"{sub.name}: {why}", offset=ins.addr)
            log.warning(err.render())
            if errors is not None:
                errors.append(err)
            continue
        lit = instrs[i - 3]
        sites.append(CallSite(sub.start, ins.addr, ri, lit.literal, lit.literal_addr))
    return sites


@dataclass
class IoAccess:
    pc: int
    kind: str  # read | write
    addr: int
    range: tuple
    source: str = "emulation"  # emulation | static | both

    @property
    def key(self) -> tuple:
        return (self.pc, self.kind, self.addr)

    def to_dict(self) -> dict:
        return {"pc": self.pc, "kind": self.kind, "addr": self.addr,
                "range": list(self.range), "source": self.source}


@dataclass
class Node:
    key: object  # subroutine start, or "sym:<name>", or "unknown"
    kind: str  # sub | symbol | unknown
    name: str
    start: Optional[int] = None
    end: Optional[int] = None
    role: Optional[str] = None
    fingerprint: Optional[str] = None
    matched_name: Optional[str] = None
    io_reads: list = field(default_factory=list)
    io_writes: list = field(default_factory=list)

    @property
    def label(self) -> str:
        return self.matched_name or self.name

    def to_dict(self) -> dict:
        d = {"key": self.key, "kind": self.kind, "name": self.name, "label": self.label}
        if self.kind == "sub":
            d.update(start=self.start, end=self.end, role=self.role, fingerprint=self.fingerprint,
                     matched_name=self.matched_name,
                     io_reads=[a.to_dict() for a in self.io_reads],
                     io_writes=[a.to_dict() for a in self.io_writes])
        return d


@dataclass
class Edge:
    caller: int
    callee: object
    count: int
    kind: str  # static | dynamic

    def to_dict(self) -> dict:
        return {"caller": self.caller, "callee": self.callee, "count": self.count, "kind": self.kind}


@dataclass
class CallGraph:
    nodes: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)
    sites: list = field(default_factory=list)
    unresolved: list = field(default_factory=list)
    sound: bool = True

    @property
    def fully_resolved(self) -> bool:
        return not self.unresolved

    def label(self, key) -> str:
        return self.nodes[key].label

    def edge_map(self) -> dict:
        return {(e.caller, e.callee, e.kind): e.count for e in self.edges}

    def named_edges(self) -> dict:
        return {(self.label(e.caller), self.label(e.callee), e.kind): e.count for e in self.edges}

    def out_edges(self, key) -> list:
        return [e for e in self.edges if e.caller == key]

    def sub_nodes(self) -> list:
        return [n for n in self.nodes.values() if n.kind == "sub"]

    def to_dict(self) -> dict:
        return {"sound": self.sound, "fully_resolved": self.fully_resolved,
                "nodes": [self.nodes[k].to_dict() for k in _sorted_keys(self.nodes)],
                "edges": [e.to_dict() for e in self.edges],
                "call_sites": [s.to_dict() for s in self.sites]}


def _sorted_keys(nodes: dict) -> list:
    return sorted(nodes, key=lambda k: (0, k, "") if isinstance(k, int) else (1, 0, str(k)))


def symbol_key(name: str) -> str:
    return f"sym:{name}"


def build_cfg(binary: PrgBinary, calltable: CallTable, symtab: Optional[list] = None,
              dispatch_base: int = 0, errors: Optional[list] = None) -> CallGraph:
    binary.decode()
    symtab = binary.symbols if symtab is None else symtab
    graph = CallGraph(sound=calltable.sound)
    for sub in binary.subroutines:
        graph.nodes[sub.start] = Node(sub.start, "sub", sub.name, sub.start, sub.pool_end, sub.role.value)
    jumps = {}
    for entry in symtab:
        key = symbol_key(entry.name)
        graph.nodes.setdefault(key, Node(key, "symbol", entry.name))
        jumps.setdefault(dispatch_base + entry.jump_offset, key)
    counts: dict = {}
    by_start = binary.by_start()
    for sub in binary.subroutines:
        for site in find_call_sites(sub, errors):
            if site.sub_offset in calltable.slots:
                site.kind, site.callee = "static", calltable.slots[site.sub_offset]
            elif site.sub_offset in jumps:
                site.kind, site.callee = "dynamic", jumps[site.sub_offset]
            else:
                err = UnresolvedTarget(f"{sub.name}: SUB_OFFSET {site.sub_offset:#x} matches no slot or symbol",
                                       offset=site.dispatch_pc)
                log.warning(err.render())
                if errors is not None:
                    errors.append(err)
                graph.unresolved.append(site)
                graph.nodes.setdefault(UNKNOWN, Node(UNKNOWN, "unknown", UNKNOWN))
                site.kind, site.callee = "unresolved", UNKNOWN
            graph.sites.append(site)
            k = (sub.start, site.callee, "dynamic" if site.kind == "dynamic" else "static")
            counts[k] = counts.get(k, 0) + 1
        for ins in sub.instrs:
            target = ins.branch_target
            if target is None or sub.contains(target):
                continue
            callee = binary.subroutine_at(target)
            if callee is not None and callee.start == target and callee.start in by_start:
                k = (sub.start, callee.start, "static")
                counts[k] = counts.get(k, 0) + 1
    graph.edges = [Edge(c, t, n, kind) for (c, t, kind), n in
                   sorted(counts.items(), key=lambda kv: (kv[0][0], str(kv[0][1]), kv[0][2]))]
    return graph


# --------------------------------------------------------------------------
# I/O annotation


def _static_addresses(sub: Subroutine):
    """(pc, kind, addr) for loads/stores whose address is a tracked literal constant."""
    targets = {ins.branch_target for ins in sub.instrs if ins.branch_target is not None}
    known: dict = {}
    for ins in sub.instrs:
        if ins.addr in targets:
            known.clear()
        if ins.error is not None:
            known.clear()
            continue
        op = ins.op
        if op in ("ldr", "str") and isinstance(ins.operands[1], Mem):
            mem = ins.operands[1]
            rt = ins.operands[0].n
            if mem.base in known and mem.index is None:
                base = known[mem.base]
                addr = base + (-mem.offset if mem.subtract else mem.offset) if mem.pre else base
                yield ins.addr, "read" if op == "ldr" else "write", addr & 0xFFFFFFFF
            if mem.writeback or not mem.pre:
                known.pop(mem.base, None)
            if op == "ldr":
                if ins.literal is not None and not ins.suffix and ins.cond == 14:
                    known[rt] = ins.literal
                else:
                    known.pop(rt, None)
            continue
        if op == "mov" and ins.cond == 14 and isinstance(ins.operands[1], Imm):
            known[ins.operands[0].n] = ins.operands[1].value
            continue
        if op in ("bl", "bx") or ins.writes_pc:
            known.clear()
            continue
        if op == "ldm":
            for r in ins.operands[1].regs:
                known.pop(r, None)
        if ins.operands and isinstance(ins.operands[0], Reg) and op not in ("str", "stm", "tst", "teq", "cmp", "cmn"):
            known.pop(ins.operands[0].n, None)


def annotate_io(binary: PrgBinary, graph: CallGraph, iomap: IoMap, image_base: int = 0,
                step_budget: int = SOLO_BUDGET) -> CallGraph:
    """Solo-emulate every subroutine from zeroed state and merge with static literal tracking."""
    for sub in binary.subroutines:
        found: dict = {}
        try:
            _, trace, reason = run(binary, RunConfig(sub.start, step_budget=step_budget, image_base=image_base))
            if reason != HaltReason.Returned:
                log.info("%s: solo emulation halted with %s", sub.name, reason.value)
            for rec in trace.records:
                if not sub.in_code(rec.pc):
                    continue
                rng = iomap.input_range(rec.addr) if rec.kind == "read" else iomap.output_range(rec.addr)
                if rng is not None:
                    found[(rec.pc, rec.kind, rec.addr)] = IoAccess(rec.pc, rec.kind, rec.addr, (rng.start, rng.end))
        except EmulationFault as exc:
            log.warning("%s: emulation fault (%s); using static matching only", sub.name, exc.render())
        for pc, kind, addr in _static_addresses(sub):
            rng = iomap.input_range(addr) if kind == "read" else iomap.output_range(addr)
            if rng is None:
                continue
            acc = found.get((pc, kind, addr))
            if acc is None:
                found[(pc, kind, addr)] = IoAccess(pc, kind, addr, (rng.start, rng.end), "static")
            elif acc.source == "emulation":
                acc.source = "both"
        node = graph.nodes[sub.start]
        accesses = sorted(found.values(), key=lambda a: a.key)
        node.io_reads = [a for a in accesses if a.kind == "read"]
        node.io_writes = [a for a in accesses if a.kind == "write"]
    return graph


# --------------------------------------------------------------------------
# known functions


def match_known(binary: PrgBinary, db: FingerprintDb, graph: Optional[CallGraph] = None,
                errors: Optional[list] = None) -> dict:
    """Fingerprint every subroutine; returns start -> matched name and renames graph nodes."""
    renames = {}
    for sub in binary.subroutines:
        try:
            digest = fingerprint(sub)
        except EmptyBody:
            continue
        if graph is not None:
            graph.nodes[sub.start].fingerprint = digest
        try:
            hit = db.lookup(digest)
        except AmbiguousMatch as exc:
            log.warning("%s: ambiguous match %s", sub.name, ", ".join(exc.names))
            if errors is not None:
                errors.append(AmbiguousMatch(f"{sub.name}: {exc}", exc.names))
            continue
        if hit is not None:
            renames[sub.start] = hit.name
    if graph is not None:
        for start, name in renames.items():
            graph.nodes[start].matched_name = name
    mark_library_roles(binary, renames)
    if graph is not None:
        for sub in binary.subroutines:
            graph.nodes[sub.start].role = sub.role.value
    return renames


# --------------------------------------------------------------------------
# argument extraction


@dataclass
class ArgValue:
    name: str
    type: str
    raw: int
    decoded: object
    provenance: Optional[int] = None  # file offset of the literal the value came from

    def to_dict(self) -> dict:
        return {"name": self.name, "type": self.type, "raw": self.raw, "decoded": self.decoded,
                "provenance": self.provenance}


@dataclass
class ExtractedArgs:
    callsite: CallSite
    function: str
    base: int
    params: list

    def __getitem__(self, name: str) -> ArgValue:
        for p in self.params:
            if p.name.lower() == name.lower():
                return p
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"dispatch_pc": self.callsite.dispatch_pc, "caller": self.callsite.caller,
                "function": self.function, "base": self.base,
                "params": [p.to_dict() for p in self.params]}


def _read_raw(state: MachineState, addr: int, width: int) -> int:
    value = 0
    for i in range(width):
        a = addr + i
        value |= ((state.mem.get(a & ~3, 0) >> ((a & 3) * 8)) & 0xFF) << (8 * i)
    return value


def extract_args(binary: PrgBinary, callsite: CallSite, layout: Optional[ParamLayout],
                 globals_state: Optional[MachineState] = None, image_base: int = 0,
                 step_budget: int = 10_000_000) -> ExtractedArgs:
    if layout is None:
        raise NoLayout("callee has no parameter layout", offset=callsite.dispatch_pc)
    state = globals_state if globals_state is not None else snapshot_globals(binary, image_base)
    cfg = RunConfig(callsite.caller, halt_at={callsite.dispatch_pc}, step_budget=step_budget,
                    image_base=image_base)
    st, _, reason = run(binary, cfg, state)
    if reason != HaltReason.Breakpoint:
        raise HaltNotReached(f"call site not reached ({reason.value})", offset=callsite.dispatch_pc)
    base = st.regs[0]
    params = []
    for p in layout.params:
        addr = (base + p.offset) & 0xFFFFFFFF
        raw = _read_raw(st, addr, p.type.width)
        # memtags: addr -> (("literal", file offset, width), stored width)
        tag, stored = st.memtags.get(addr, (None, 0))
        prov = tag[1] if tag is not None and stored == tag[2] == p.type.width else None
        params.append(ArgValue(p.name, p.type.value, raw, p.type.decode(raw), prov))
    return ExtractedArgs(callsite, layout.function, base, params)


# --------------------------------------------------------------------------
# pipeline


@dataclass
class AnalysisResult:
    binary: PrgBinary
    calltable: CallTable
    graph: CallGraph
    args: list = field(default_factory=list)
    errors: list = field(default_factory=list)
    iomap: Optional[IoMap] = None
    image_base: int = 0
    dispatch_base: int = 0

    def summary(self) -> dict:
        g = self.graph
        return {"subroutines": len(self.binary.subroutines), "edges": len(g.edges),
                "unresolved": len(g.unresolved),
                "matches": sorted(n.matched_name for n in g.sub_nodes() if n.matched_name),
                "io_reads": sum(len(n.io_reads) for n in g.sub_nodes()),
                "io_writes": sum(len(n.io_writes) for n in g.sub_nodes()),
                "sound": g.sound}

    def to_dict(self) -> dict:
        b = self.binary
        return {
            "format": "plcrev-analysis",
            "version": 1,
            "binary": {"path": b.path, "sha256": b.sha256, "size": len(b.data),
                       "header": b.header.to_dict(), "sections": b.sections.to_dict()},
            "config": {"image_base": self.image_base, "dispatch_base": self.dispatch_base,
                       "iomap": self.iomap.to_dict() if self.iomap else None},
            "summary": self.summary(),
            "subroutines": [{"name": s.name, "start": s.start, "end": s.end, "pool_end": s.pool_end,
                             "role": s.role.value} for s in b.subroutines],
            "symbols": [{"name": e.name, "index": e.index, "jump_offset": e.jump_offset, "offset": e.offset}
                        for e in b.symbols],
            "call_table": self.calltable.to_dict(),
            "graph": self.graph.to_dict(),
            "arguments": [a.to_dict() for a in self.args],
            "errors": [e.render() for e in self.errors],
        }


def analyze(binary: PrgBinary, iomap: Optional[IoMap] = None, db: Optional[FingerprintDb] = None,
            image_base: int = 0, dispatch_base: int = 0, extract: bool = True,
            io: bool = True) -> AnalysisResult:
    """Full pipeline: call table, CFG, I/O annotation, matching and argument extraction."""
    binary.decode()
    errors: list = []
    try:
        table = recover_call_table(binary, image_base)
    except IncompleteTable as exc:
        log.warning(exc.render())
        errors.append(exc)
        table = exc.table
    graph = build_cfg(binary, table, binary.symbols, dispatch_base, errors)
    if iomap is not None and io:
        annotate_io(binary, graph, iomap, image_base)
    result = AnalysisResult(binary, table, graph, errors=errors, iomap=iomap,
                            image_base=image_base, dispatch_base=dispatch_base)
    if db is not None:
        match_known(binary, db, graph, errors)
        if extract:
            result.args = extract_all(binary, graph, db, image_base, errors)
    return result


def extract_all(binary: PrgBinary, graph: CallGraph, db: FingerprintDb, image_base: int = 0,
                errors: Optional[list] = None) -> list:
    out = []
    state = None
    for site in graph.sites:
        if site.kind != "static":
            continue
        name = graph.nodes[site.callee].matched_name
        layout = db.layout_for(name) if name else None
        if layout is None:
            continue
        try:
            if state is None:
                state = snapshot_globals(binary, image_base)
            out.append(extract_args(binary, site, layout, state, image_base))
        except PlcrevError as exc:
            log.warning(exc.render())
            if errors is not None:
                errors.append(exc)
    return out
