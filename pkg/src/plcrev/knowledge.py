"""Platform knowledge: function fingerprints, I/O memory maps, TRG codec, parameter layouts."""
from __future__ import annotations

import enum
import hashlib
import json
import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Union

from .binfmt import PrgBinary, Role, Subroutine
from .errors import PlcrevError

DB_VERSION = 1
# bump when the mnemonic stream or separator changes; digests depend on it
CANON_VERSION = 1
SEPARATOR = ","
TRG_BLOCK = 256


class EmptyBody(PlcrevError):
    pass


class CollisionDetected(PlcrevError):
    pass


class AmbiguousMatch(PlcrevError):
    def __init__(self, message, names):
        super().__init__(message)
        self.names = names


class MalformedMap(PlcrevError):
    pass


class InsufficientPlaintext(PlcrevError):
    pass


class DbFormatError(PlcrevError):
    pass


# --------------------------------------------------------------------------
# fingerprints


def mnemonic_stream(sub: Subroutine) -> list:
    if not sub.instrs:
        from .armdec import decode_all
        sub.instrs = decode_all(sub)
    return [i.mnemonic.lower() for i in sub.instrs if i.error is None]


def fingerprint_mnemonics(mnemonics: Iterable[str]) -> str:
    mnemonics = list(mnemonics)
    if not mnemonics:
        raise EmptyBody("no decodable instructions")
    return hashlib.sha256(SEPARATOR.join(mnemonics).encode("ascii")).hexdigest()


def fingerprint(sub: Subroutine) -> str:
    """SHA-256 over the comma-joined lowercase mnemonic stream (operands dropped)."""
    try:
        return fingerprint_mnemonics(mnemonic_stream(sub))
    except EmptyBody as exc:
        raise EmptyBody(str(exc), offset=sub.start) from None


class ParamType(str, enum.Enum):
    REAL32 = "REAL32"
    DWORD = "DWORD"
    WORD = "WORD"
    BOOL = "BOOL"
    TIME = "TIME"

    @property
    def width(self) -> int:
        return {"REAL32": 4, "DWORD": 4, "WORD": 2, "BOOL": 1, "TIME": 4}[self.value]

    def decode(self, raw: int):
        if self is ParamType.REAL32:
            return struct.unpack("<f", struct.pack("<I", raw & 0xFFFFFFFF))[0]
        if self is ParamType.BOOL:
            return bool(raw & 0xFF)
        return raw

    def encode(self, value) -> int:
        """Raw little-endian integer holding ``value`` in this type."""
        if self is ParamType.REAL32:
            return struct.unpack("<I", struct.pack("<f", float(value)))[0]
        if self is ParamType.BOOL:
            return int(bool(value))
        raw = int(value)
        if not 0 <= raw < 1 << (8 * self.width):
            raise ValueError(f"{value} does not fit {self.value}")
        return raw


@dataclass(frozen=True)
class Param:
    name: str
    type: ParamType
    offset: int


class BaseConvention(str, enum.Enum):
    # instance/argument base in r0 when the dispatch's mov pc, Ri executes
    R0_AT_DISPATCH = "r0_at_dispatch"


@dataclass(frozen=True)
class ParamLayout:
    function: str
    params: tuple
    base_convention: BaseConvention = BaseConvention.R0_AT_DISPATCH

    def __post_init__(self):
        end = 0
        for p in self.params:
            # widths are >= 1, so this also enforces strictly increasing offsets
            if p.offset < end:
                raise ValueError(f"{self.function}: parameter {p.name} overlaps its predecessor")
            end = p.offset + p.type.width

    def param(self, name: str) -> Param:
        for p in self.params:
            if p.name.lower() == name.lower():
                return p
        raise KeyError(f"{self.function} has no parameter {name}")

    def to_dict(self) -> dict:
        return {"function": self.function, "base_convention": self.base_convention.value,
                "params": [{"name": p.name, "type": p.type.value, "offset": p.offset} for p in self.params]}

    @classmethod
    def from_dict(cls, d: dict) -> "ParamLayout":
        params = tuple(Param(p["name"], ParamType(p["type"]), int(p["offset"])) for p in d["params"])
        return cls(d["function"], params, BaseConvention(d.get("base_convention", "r0_at_dispatch")))


PID_FIXCYCLE = ParamLayout("PID_FIXCYCLE", tuple(Param(n, ParamType(t), o) for n, t, o in (
    ("ACTUAL", "REAL32", 0x00),
    ("SET_POINT", "REAL32", 0x04),
    ("KP", "REAL32", 0x08),
    ("TN", "REAL32", 0x0C),
    ("TV", "REAL32", 0x10),
    ("Y_MANUAL", "REAL32", 0x14),
    ("Y_OFFSET", "REAL32", 0x18),
    ("Y_MIN", "REAL32", 0x1C),
    ("Y_MAX", "REAL32", 0x20),
    ("MANUAL", "BOOL", 0x24),
    ("RESET", "BOOL", 0x25),
    ("CYCLE", "REAL32", 0x28),
)))

BUILTIN_LAYOUTS = {PID_FIXCYCLE.function: PID_FIXCYCLE}


@dataclass
class Fingerprint:
    sha256: str
    name: str
    library: str = ""
    mnemonic_count: int = 0
    param_layout: Optional[ParamLayout] = None

    def __post_init__(self):
        if not re.fullmatch(r"[0-9a-f]{64}", self.sha256):
            raise ValueError(f"bad digest {self.sha256!r}")

    def to_dict(self) -> dict:
        d = {"sha256": self.sha256, "name": self.name, "library": self.library,
             "mnemonic_count": self.mnemonic_count}
        if self.param_layout is not None:
            d["param_layout"] = self.param_layout.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Fingerprint":
        layout = d.get("param_layout")
        return cls(d["sha256"], d["name"], d.get("library", ""), int(d.get("mnemonic_count", 0)),
                   ParamLayout.from_dict(layout) if layout else None)


@dataclass
class FingerprintDb:
    entries: list = field(default_factory=list)
    version: int = DB_VERSION
    canon_version: int = CANON_VERSION

    def __post_init__(self):
        self._index: dict = {}
        for e in self.entries:
            self._index.setdefault(e.sha256, []).append(e)

    def __len__(self) -> int:
        return len(self.entries)

    def add(self, fp: Fingerprint) -> None:
        known = self._index.get(fp.sha256, [])
        for other in known:
            if other.name == fp.name:
                return
        if known:
            raise CollisionDetected(f"{fp.name} and {known[0].name} share digest {fp.sha256}",
                                    names=[known[0].name, fp.name])
        self.entries.append(fp)
        self._index.setdefault(fp.sha256, []).append(fp)

    def lookup(self, sha256: str) -> Optional[Fingerprint]:
        hits = self._index.get(sha256, [])
        names = sorted({h.name for h in hits})
        if len(names) > 1:
            raise AmbiguousMatch(f"digest {sha256[:16]}... matches {', '.join(names)}", names)
        return hits[0] if hits else None

    def layout_for(self, name: str) -> Optional[ParamLayout]:
        for e in self.entries:
            if e.name == name and e.param_layout is not None:
                return e.param_layout
        return BUILTIN_LAYOUTS.get(name)

    def to_json(self) -> str:
        entries = sorted(self.entries, key=lambda e: (e.name, e.sha256))
        doc = {"version": self.version, "canon_version": self.canon_version,
               "separator": SEPARATOR, "entries": [e.to_dict() for e in entries]}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "FingerprintDb":
        doc = json.loads(text)
        if doc.get("version") != DB_VERSION or doc.get("canon_version") != CANON_VERSION:
            raise DbFormatError(f"database format {doc.get('version')}/{doc.get('canon_version')} "
                                f"is not {DB_VERSION}/{CANON_VERSION}")
        return cls([Fingerprint.from_dict(e) for e in doc["entries"]])

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "FingerprintDb":
        return cls.from_json(Path(path).read_text())


def library_pair(binary: PrgBinary) -> tuple:
    """The (main, INIT) pair immediately preceding PLC_PRG."""
    subs = binary.subroutines
    if len(subs) < 9:
        raise PlcrevError("binary has no function-block pair")
    return subs[-4], subs[-3]


def build_db(corpus: Iterable, db: Optional[FingerprintDb] = None) -> FingerprintDb:
    """corpus: iterable of (binary, name, library) or (binary, name, library, layout)."""
    db = db if db is not None else FingerprintDb()
    for item in corpus:
        binary, name, library = item[:3]
        layout = item[3] if len(item) > 3 else BUILTIN_LAYOUTS.get(name)
        main, init = library_pair(binary)
        for sub, label, lay in ((main, name, layout), (init, name + "_INIT", None)):
            mn = mnemonic_stream(sub)
            db.add(Fingerprint(fingerprint_mnemonics(mn), label, library, len(mn), lay))
    return db


def mark_library_roles(binary: PrgBinary, names: dict) -> None:
    """Upgrade matched user-FB pairs to library roles; ``names`` maps start -> name."""
    for sub in binary.subroutines:
        if sub.start in names and sub.role in (Role.UserFb, Role.UserFbInit):
            sub.role = Role.LibMain if sub.role == Role.UserFb else Role.LibInit


# --------------------------------------------------------------------------
# I/O maps


@dataclass(frozen=True, order=True)
class AddrRange:
    start: int
    end: int  # inclusive

    def __contains__(self, addr: int) -> bool:
        return self.start <= addr <= self.end

    def __str__(self) -> str:
        return f"{self.start:#010x}..{self.end:#010x}"


@dataclass(frozen=True)
class IoMap:
    model: str
    input_ranges: tuple
    output_ranges: tuple

    def __post_init__(self):
        for label, ranges in (("input", self.input_ranges), ("output", self.output_ranges)):
            for r in ranges:
                if r.start > r.end:
                    raise MalformedMap(f"{label} range {r} is reversed")
            for a, b in zip(ranges, ranges[1:]):
                if b.start <= a.end:
                    raise MalformedMap(f"{label} ranges {a} and {b} overlap")
        for a in self.input_ranges:
            for b in self.output_ranges:
                if a.start <= b.end and b.start <= a.end:
                    raise MalformedMap(f"input {a} overlaps output {b}")

    def input_range(self, addr: int) -> Optional[AddrRange]:
        return next((r for r in self.input_ranges if addr in r), None)

    def output_range(self, addr: int) -> Optional[AddrRange]:
        return next((r for r in self.output_ranges if addr in r), None)

    def to_dict(self) -> dict:
        return {"model": self.model,
                "input": [[r.start, r.end] for r in self.input_ranges],
                "output": [[r.start, r.end] for r in self.output_ranges]}

    @classmethod
    def from_dict(cls, d: dict) -> "IoMap":
        return make_iomap(d["model"], [tuple(r) for r in d.get("input", [])],
                          [tuple(r) for r in d.get("output", [])])


def make_iomap(model: str, inputs, outputs) -> IoMap:
    if not inputs and not outputs:
        raise MalformedMap("map declares no ranges")
    return IoMap(model, tuple(sorted(AddrRange(*r) for r in inputs)),
                 tuple(sorted(AddrRange(*r) for r in outputs)))


_RANGE = re.compile(r"^\s*(0x[0-9a-fA-F]+|\d+)\s*\.\.\s*(0x[0-9a-fA-F]+|\d+)\s*$")


def parse_iomap(decoded: Union[bytes, str]) -> IoMap:
    """Parse ``model=``, ``input=a..b`` and ``output=a..b`` lines (# comments allowed)."""
    text = decoded.decode("ascii", "replace") if isinstance(decoded, (bytes, bytearray)) else decoded
    model = None
    ranges = {"input": [], "output": []}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip().lower()
        if not sep:
            raise MalformedMap(f"line {lineno}: expected key=value")
        if key == "model":
            model = value.strip()
        elif key in ranges:
            m = _RANGE.match(value)
            if not m:
                raise MalformedMap(f"line {lineno}: bad range {value.strip()!r}")
            ranges[key].append((int(m.group(1), 0), int(m.group(2), 0)))
        else:
            raise MalformedMap(f"line {lineno}: unknown key {key!r}")
    if not model:
        raise MalformedMap("missing model line")
    return make_iomap(model, ranges["input"], ranges["output"])


def render_iomap(iomap: IoMap) -> str:
    lines = [f"model={iomap.model}"]
    lines += [f"input={r.start:#010x}..{r.end:#010x}" for r in iomap.input_ranges]
    lines += [f"output={r.start:#010x}..{r.end:#010x}" for r in iomap.output_ranges]
    return "\n".join(lines) + "\n"


def load_iomap(path) -> IoMap:
    raw = Path(path).read_bytes()
    if raw.lstrip().startswith(b"{"):
        return IoMap.from_dict(json.loads(raw))
    return parse_iomap(raw)


WAGO_750_881 = make_iomap("WAGO 750-881", [(0x28CFEC00, 0x28CFF7F8)], [(0x28CFD800, 0x28CFE3F8)])
BUILTIN_IOMAPS = {"WAGO 750-881": WAGO_750_881, "wago-750-881": WAGO_750_881}


def builtin_or_file(spec: Optional[str]) -> IoMap:
    if spec is None:
        return WAGO_750_881
    if spec in BUILTIN_IOMAPS:
        return BUILTIN_IOMAPS[spec]
    return load_iomap(spec)


# --------------------------------------------------------------------------
# TRG codec


@dataclass(frozen=True)
class TrgKey:
    key: bytes

    def __post_init__(self):
        if len(self.key) != TRG_BLOCK:
            raise ValueError(f"TRG key must be {TRG_BLOCK} bytes, got {len(self.key)}")

    @classmethod
    def load(cls, path) -> "TrgKey":
        return cls(Path(path).read_bytes())


def _as_key(key) -> bytes:
    return key.key if isinstance(key, TrgKey) else TrgKey(bytes(key)).key


def trg_decode(cipher: bytes, key) -> bytes:
    """Repeating-key XOR over 256-byte blocks; the final partial block uses the key prefix."""
    k = _as_key(key)
    n = len(cipher)
    stream = (k * (n // TRG_BLOCK + 1))[:n]
    return (int.from_bytes(cipher, "little") ^ int.from_bytes(stream, "little")).to_bytes(n, "little")


trg_encode = trg_decode


def trg_recover_key(cipher: bytes, known_plain: bytes) -> TrgKey:
    if len(known_plain) < TRG_BLOCK or len(cipher) < TRG_BLOCK:
        raise InsufficientPlaintext(f"need {TRG_BLOCK} aligned plaintext bytes, have "
                                    f"{min(len(known_plain), len(cipher))}")
    return TrgKey(bytes(c ^ p for c, p in zip(cipher[:TRG_BLOCK], known_plain[:TRG_BLOCK])))
