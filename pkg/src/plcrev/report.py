"""DOT call graphs and static HTML reports built from an analysis document."""

import html
import re
from pathlib import Path

from .armdec import format_listing_line

COLORS = {"static": "blue", "dynamic": "red"}


def _node_id(key) -> str:
    if isinstance(key, int):
        return f"n_{key:x}"
    return "s_" + re.sub(r"[^A-Za-z0-9_]", "_", str(key).split(":", 1)[-1])


def _quote(text: str) -> str:
    return '"' + str(text).replace("\\", "\\\\").replace('"', '\\"') + '"'


def page_name(start: int) -> str:
    return f"sub_{start:x}.html"


def _sort_key(key):
    return (0, key, "") if isinstance(key, int) else (1, 0, str(key))


def graph_dot(graph: dict, url_prefix: str = "html/", renames: dict = None) -> str:
    """DOT digraph; ``graph`` is the ``graph`` member of an analysis document."""
    renames = renames or {}
    nodes = {n["key"]: n for n in graph["nodes"]}
    lines = ["digraph callgraph {", "  node [shape=box, fontname=monospace];"]
    for key in sorted(nodes, key=_sort_key):
        n = nodes[key]
        label = renames.get(str(key), n["label"])
        attrs = [f"label={_quote(label)}"]
        if n["kind"] == "sub":
            attrs.append(f"URL={_quote(url_prefix + page_name(n['start']))}")
            if n.get("matched_name"):
                attrs.append("style=filled, fillcolor=lightyellow")
        else:
            attrs.append("shape=ellipse")
        lines.append(f"  {_node_id(key)} [{', '.join(attrs)}];")
    edges = sorted(graph["edges"], key=lambda e: (_sort_key(e["caller"]), _sort_key(e["callee"]), e["kind"]))
    for e in edges:
        lines.append(f"  {_node_id(e['caller'])} -> {_node_id(e['callee'])} "
                     f"[color={COLORS.get(e['kind'], 'black')}, label={_quote(e['count'])}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


_CSS = "body{font-family:sans-serif}pre{font-family:monospace}td,th{padding:0 .6em;text-align:left}"


def _page(title: str, body: str) -> str:
    return (f"<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\"><title>{html.escape(title)}</title>"
            f"<style>{_CSS}</style></head>\n<body>\n<h1>{html.escape(title)}</h1>\n{body}\n</body></html>\n")


def _link(nodes: dict, key, renames: dict) -> str:
    n = nodes.get(key)
    if n is None:
        return html.escape(str(key))
    label = html.escape(renames.get(str(key), n["label"]))
    if n["kind"] != "sub":
        return label
    return f'<a href="{page_name(n["start"])}">{label}</a>'


def write_html(binary, doc: dict, outdir, renames: dict = None, notes: dict = None) -> list:
    """Index plus one disassembly page per subroutine; returns the written paths."""
    renames, notes = renames or {}, notes or {}
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    binary.decode()
    graph = doc["graph"]
    nodes = {n["key"]: n for n in graph["nodes"]}
    rows = []
    for sub in binary.subroutines:
        n = nodes[sub.start]
        rows.append(f"<tr><td>{sub.start:#x}</td><td>{sub.end:#x}</td><td>{_link(nodes, sub.start, renames)}</td>"
                    f"<td>{html.escape(n.get('role') or '')}</td>"
                    f"<td>{len(n['io_reads'])}/{len(n['io_writes'])}</td></tr>")
    s = doc["summary"]
    index = (f"<p>{html.escape(str(doc['binary']['path']))} sha256 {doc['binary']['sha256']}</p>"
             f"<p>{s['subroutines']} subroutines, {s['edges']} edges, {s['unresolved']} unresolved</p>"
             "<table><tr><th>start</th><th>end</th><th>name</th><th>role</th><th>io r/w</th></tr>\n"
             + "\n".join(rows) + "</table>")
    written = [out / "index.html"]
    written[0].write_text(_page("call graph index", index))
    for sub in binary.subroutines:
        n = nodes[sub.start]
        calls = [e for e in graph["edges"] if e["caller"] == sub.start]
        callers = [e for e in graph["edges"] if e["callee"] == sub.start]
        parts = ['<p><a href="index.html">index</a></p>']
        if str(sub.start) in notes:
            parts.append(f"<p>{html.escape(notes[str(sub.start)])}</p>")
        if calls:
            parts.append("<h2>calls</h2><ul>" + "".join(
                f"<li>{_link(nodes, e['callee'], renames)} {e['kind']} x{e['count']}</li>" for e in calls) + "</ul>")
        if callers:
            parts.append("<h2>called by</h2><ul>" + "".join(
                f"<li>{_link(nodes, e['caller'], renames)} x{e['count']}</li>" for e in callers) + "</ul>")
        io = n["io_reads"] + n["io_writes"]
        if io:
            parts.append("<h2>I/O</h2><ul>" + "".join(
                f"<li>{a['pc']:#x} {a['kind']} {a['addr']:#x}</li>" for a in io) + "</ul>")
        listing = "\n".join(html.escape(format_listing_line(i)) for i in sub.instrs)
        parts.append(f"<h2>code</h2><pre>{listing}</pre>")
        if sub.pool_end > sub.end:
            pool = "\n".join(f"{off:#010x}: {int.from_bytes(binary.data[off:off + 4], 'little'):08x}  .word"
                             for off in range(sub.end, sub.pool_end, 4))
            parts.append(f"<h2>literal pool</h2><pre>{pool}</pre>")
        path = out / page_name(sub.start)
        path.write_text(_page(renames.get(str(sub.start), n["label"]), "\n".join(parts)))
        written.append(path)
    return written
