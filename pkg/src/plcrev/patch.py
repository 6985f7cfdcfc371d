"""Equal-length byte patches with CHK regeneration."""

import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path

from .errors import PlcrevError
from .knowledge import ParamType


class OldMismatch(PlcrevError):
    pass


class Overlap(PlcrevError):
    pass


class OutOfBounds(PlcrevError):
    pass


class ValueNotPatchable(PlcrevError):
    pass


class SameFile(PlcrevError):
    pass


def compute_chk(data: bytes) -> int:
    return sum(data) & 0xFFFFFFFF


def chk_bytes(value: int) -> bytes:
    return struct.pack("<I", value & 0xFFFFFFFF)


def read_chk(raw: bytes) -> int:
    if len(raw) != 4:
        raise PlcrevError(f"CHK file must be 4 bytes, got {len(raw)}")
    return struct.unpack("<I", raw)[0]


@dataclass(frozen=True)
class PatchOp:
    offset: int
    old: bytes
    new: bytes
    reason: str = ""

    def __post_init__(self):
        if len(self.old) != len(self.new):
            raise ValueError("old and new must have equal length")
        if self.offset < 0:
            raise OutOfBounds("negative offset", offset=self.offset)

    @property
    def end(self) -> int:
        return self.offset + len(self.new)

    def to_dict(self) -> dict:
        return {"offset": f"{self.offset:#x}", "old": self.old.hex(), "new": self.new.hex(),
                "reason": self.reason}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchOp":
        off = d["offset"]
        off = int(off, 0) if isinstance(off, str) else int(off)
        return cls(off, bytes.fromhex(d["old"]), bytes.fromhex(d["new"]), d.get("reason", ""))


def dump_script(ops) -> str:
    return json.dumps([op.to_dict() for op in ops], indent=1) + "\n"


def load_script(text: str) -> list:
    doc = json.loads(text)
    if not isinstance(doc, list):
        raise PlcrevError("patch script must be a JSON list")
    return [PatchOp.from_dict(d) for d in doc]


def check(data: bytes, ops) -> list:
    """Validate ops against data; returns them sorted by offset."""
    ops = sorted(ops, key=lambda o: o.offset)
    for a, b in zip(ops, ops[1:]):
        if b.offset < a.end:
            raise Overlap(f"ops at {a.offset:#x} and {b.offset:#x} overlap", offset=b.offset)
    for op in ops:
        if op.end > len(data):
            raise OutOfBounds(f"{len(op.new)} bytes past end of {len(data)}-byte file", offset=op.offset)
        if data[op.offset:op.end] != op.old:
            raise OldMismatch(f"expected {op.old.hex()}, found {data[op.offset:op.end].hex()}",
                              offset=op.offset)
    return ops


def apply(data: bytes, ops) -> tuple:
    """-> (patched bytes, checksum, CHK file bytes); data is never modified."""
    out = bytearray(data)
    for op in check(data, ops):
        out[op.offset:op.end] = op.new
    out = bytes(out)
    chk = compute_chk(out)
    return out, chk, chk_bytes(chk)


def apply_file(src, dst, ops, chk_path=None) -> int:
    """Patch src into dst (and dst.chk unless chk_path is given). Nothing is written on error."""
    src, dst = Path(src), Path(dst)
    if src.resolve() == dst.resolve() or (dst.exists() and os.path.samefile(src, dst)):
        raise SameFile(f"refusing to patch {src} in place")
    out, chk, raw = apply(src.read_bytes(), ops)
    dst.write_bytes(out)
    Path(chk_path or dst.with_suffix(".chk")).write_bytes(raw)
    return chk


def patch_argument(binary, args, param: str, new_value) -> list:
    """One op rewriting the literal word that supplied ``param`` at the call site."""
    arg = args[param]
    if arg.provenance is None:
        raise ValueNotPatchable(f"{args.function}.{arg.name} is not a stored literal",
                                offset=args.callsite.dispatch_pc)
    ptype = ParamType(arg.type)
    width = ptype.width
    off = arg.provenance
    old = bytes(binary.data[off:off + width])
    if int.from_bytes(old, "little") != arg.raw:
        raise OldMismatch(f"literal no longer holds {arg.raw:#x}", offset=off)
    new = ptype.encode(new_value).to_bytes(width, "little")
    return [PatchOp(off, old, new, f"{args.function}.{arg.name} {arg.decoded!r} -> {new_value!r} "
                                   f"at call {args.callsite.dispatch_pc:#x}")]
