"""PRG container format: header, subroutine carving, symbol table, section map."""
from __future__ import annotations

import enum
import hashlib
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import PlcrevError

log = logging.getLogger(__name__)

HEADER_SIZE = 0x50
CODE_START = 0x50
POINTER_BIAS = 0x18

# mov r12, sp / stmfd sp!, {r11, r12, lr} / mov r11, r12
PROLOGUE = bytes.fromhex("0dc0a0e1" "00582de9" "0cb0a0e1")
# ldmdb r11, {r11, sp, pc}
EPILOGUE = bytes.fromhex("00a81be9")


class PrgFormatError(PlcrevError):
    pass


class TooShort(PrgFormatError):
    pass


class MisalignedPointer(PrgFormatError):
    pass


class NoPrologueAt0x50(PrgFormatError):
    pass


class UnterminatedSubroutine(PrgFormatError):
    pass


class EntryMismatch(PrgFormatError):
    pass


class OverlapDetected(PrgFormatError):
    pass


class Role(str, enum.Enum):
    GlobalInit = "GlobalInit"
    Support = "Support"
    SysDebug = "SysDebug"
    LibMain = "LibMain"
    LibInit = "LibInit"
    UserFb = "UserFb"
    UserFbInit = "UserFbInit"
    PlcPrg = "PlcPrg"
    MemoryInit = "MemoryInit"
    Unknown = "Unknown"


FIXED_NAMES = {
    Role.GlobalInit: "GLOBAL_INIT",
    Role.SysDebug: "SYSDEBUG",
    Role.PlcPrg: "PLC_PRG",
    Role.MemoryInit: "MEMORY_INIT",
}


@dataclass(frozen=True)
class PrgHeader:
    last_global_string_raw: int
    entry_point_raw: int
    last_subroutine_raw: int
    stack_size: int
    last_dynlib_id_raw: int
    raw: bytes

    def entry_point(self) -> int:
        return self.entry_point_raw + POINTER_BIAS

    def last_subroutine_offset(self) -> int:
        """File offset one past the last code word (end of Memory INIT's pool)."""
        return self.last_subroutine_raw + POINTER_BIAS

    def to_dict(self) -> dict:
        return {
            "last_global_string": self.last_global_string_raw,
            "entry_point_raw": self.entry_point_raw,
            "entry_point": self.entry_point(),
            "last_subroutine_raw": self.last_subroutine_raw,
            "code_end": self.last_subroutine_offset(),
            "stack_size": self.stack_size,
            "last_dynlib_id": self.last_dynlib_id_raw,
        }


@dataclass
class Subroutine:
    start: int
    end: int
    pool_end: int
    body: bytes
    pool_bytes: bytes = b""
    role: Role = Role.Unknown
    name: str = ""
    instrs: list = field(default_factory=list, repr=False)

    def __post_init__(self):
        if not self.name:
            self.name = default_name(self.start)

    @property
    def literal_pool(self) -> tuple:
        return (self.end, self.pool_end)

    @property
    def size(self) -> int:
        return self.pool_end - self.start

    def contains(self, offset: int) -> bool:
        return self.start <= offset < self.pool_end

    def in_code(self, offset: int) -> bool:
        return self.start <= offset < self.end


def default_name(start: int) -> str:
    return f"sub_{start:X}"


@dataclass(frozen=True)
class SymbolEntry:
    name: str
    index: int
    offset: int = 0  # file offset of the record

    @property
    def jump_offset(self) -> int:
        return self.index * 4 + 8

    @property
    def size(self) -> int:
        return len(self.name) + 3


@dataclass(frozen=True)
class SectionMap:
    header: tuple
    code: tuple
    symbol_table: tuple
    trailing_data: tuple

    def spans(self) -> list:
        return [("header", self.header), ("code", self.code),
                ("symbol_table", self.symbol_table), ("trailing_data", self.trailing_data)]

    def to_dict(self) -> dict:
        return {name: list(span) for name, span in self.spans()}


def parse_header(data: bytes) -> PrgHeader:
    if len(data) < HEADER_SIZE:
        raise TooShort(f"file is {len(data)} bytes, header needs {HEADER_SIZE}", offset=len(data))
    fields = {name: struct.unpack_from("<I", data, off)[0] for name, off in (
        ("last_global_string_raw", 0x04), ("entry_point_raw", 0x20), ("last_subroutine_raw", 0x2C),
        ("stack_size", 0x30), ("last_dynlib_id_raw", 0x44))}
    header = PrgHeader(raw=bytes(data[:HEADER_SIZE]), **fields)
    entry = header.entry_point()
    if entry % 4 or entry >= len(data):
        raise MisalignedPointer(f"entry point {entry:#x} invalid for {len(data):#x}-byte file", offset=0x20)
    code_end = header.last_subroutine_offset()
    if code_end % 4 or code_end > len(data) or code_end <= entry:
        raise MisalignedPointer(f"code end {code_end:#x} invalid for {len(data):#x}-byte file", offset=0x2C)
    return header


def _find_aligned(data: bytes, pattern: bytes, start: int, stop: int) -> Optional[int]:
    pos = data.find(pattern, start, stop)
    while pos != -1 and pos % 4:
        pos = data.find(pattern, pos + 1, stop)
    return None if pos == -1 else pos


def carve_subroutines(data: bytes, header: PrgHeader) -> list:
    """Split the code region into subroutines delimited by prologue/epilogue words."""
    code_end = header.last_subroutine_offset()
    if data[CODE_START:CODE_START + len(PROLOGUE)] != PROLOGUE:
        raise NoPrologueAt0x50("no subroutine prologue at the start of code", offset=CODE_START)
    subs = []
    pos: Optional[int] = CODE_START
    while pos is not None:
        epi = _find_aligned(data, EPILOGUE, pos + len(PROLOGUE), code_end)
        if epi is None:
            raise UnterminatedSubroutine("prologue without epilogue", offset=pos)
        end = epi + 4
        nxt = _find_aligned(data, PROLOGUE, end, code_end)
        pool_end = code_end if nxt is None else nxt
        subs.append(Subroutine(pos, end, pool_end, bytes(data[pos:end]), bytes(data[end:pool_end])))
        pos = nxt
    entry = header.entry_point()
    if subs[-1].start != entry:
        starts = {s.start for s in subs}
        why = "is not the last subroutine" if entry in starts else "is not a subroutine start"
        raise EntryMismatch(f"entry point {entry:#x} {why}", offset=entry)
    assign_roles(subs)
    return subs


def assign_roles(subs: list) -> None:
    """Positional role assignment; middle pairs default to user FBs."""
    n = len(subs)
    for s in subs:
        s.role = Role.Unknown
    subs[0].role = Role.GlobalInit
    if n > 1:
        subs[-1].role = Role.MemoryInit
    if n > 2:
        subs[-2].role = Role.PlcPrg
    fixed_head = min(5, n - 2)
    for i in range(1, max(fixed_head, 1)):
        subs[i].role = Role.Support
    if fixed_head >= 5:
        subs[4].role = Role.SysDebug
    middle = subs[5:n - 2]
    if len(middle) % 2:
        log.warning("odd number (%d) of function-block subroutines; pairs left unassigned", len(middle))
    else:
        for main, init in zip(middle[0::2], middle[1::2]):
            main.role, init.role = Role.UserFb, Role.UserFbInit
    for s in subs:
        s.name = FIXED_NAMES.get(s.role, default_name(s.start))


def _printable(b: int) -> bool:
    return 0x20 <= b < 0x7F


def parse_symbol_table(data: bytes, code_end: int) -> list:
    """Read ``name\\0`` + u16 records following the code region."""
    pos = code_end
    while pos < len(data) and not _printable(data[pos]):
        pos += 1
    entries = []
    while pos < len(data) and _printable(data[pos]):
        nul = data.find(b"\0", pos)
        if nul == -1 or nul + 3 > len(data):
            break
        raw_name = data[pos:nul]
        if not all(_printable(b) for b in raw_name):
            log.warning("symbol table stops at non-printable name at %#x", pos)
            break
        index = struct.unpack_from("<H", data, nul + 1)[0]
        entries.append(SymbolEntry(raw_name.decode("ascii"), index, pos))
        pos = nul + 3
    return entries


def symbol_table_end(symbols: list, code_end: int) -> int:
    if not symbols:
        return code_end
    last = symbols[-1]
    return last.offset + last.size


def build_section_map(header: PrgHeader, subs: list, symtab: list, file_size: Optional[int] = None) -> SectionMap:
    code_end = header.last_subroutine_offset()
    if subs and subs[-1].pool_end != code_end:
        raise OverlapDetected("last subroutine does not end at the code end", offset=subs[-1].pool_end)
    sym_end = symbol_table_end(symtab, code_end)
    size = sym_end if file_size is None else file_size
    spans = ((0, HEADER_SIZE), (CODE_START, code_end), (code_end, sym_end), (sym_end, size))
    prev = 0
    for lo, hi in spans:
        if lo != prev or hi < lo:
            raise OverlapDetected(f"section {lo:#x}..{hi:#x} breaks contiguity", offset=lo)
        prev = hi
    return SectionMap(*spans)


@dataclass
class PrgBinary:
    data: bytes
    header: PrgHeader
    subroutines: list
    symbols: list
    sections: SectionMap
    path: Optional[str] = None

    @property
    def code_end(self) -> int:
        return self.header.last_subroutine_offset()

    @property
    def sha256(self) -> str:
        return hashlib.sha256(self.data).hexdigest()

    def by_start(self) -> dict:
        return {s.start: s for s in self.subroutines}

    def subroutine_at(self, offset: int) -> Optional[Subroutine]:
        for s in self.subroutines:
            if s.contains(offset):
                return s
        return None

    def find(self, key) -> Subroutine:
        """Look a subroutine up by name or by any offset inside it."""
        if isinstance(key, str):
            for s in self.subroutines:
                if s.name == key:
                    return s
            key = int(key, 0)
        sub = self.subroutine_at(key)
        if sub is None:
            raise KeyError(f"no subroutine at {key:#x}")
        return sub

    def decode(self) -> "PrgBinary":
        from .armdec import decode_all
        for s in self.subroutines:
            if not s.instrs:
                s.instrs = decode_all(s)
        return self

    def serialize(self) -> bytes:
        """Reassemble the file from its dissected pieces."""
        sm = self.sections
        parts = [self.header.raw, self.data[HEADER_SIZE:sm.header[1]]]
        for s in self.subroutines:
            parts.append(s.body)
            parts.append(s.pool_bytes)
        parts.append(self.data[slice(*sm.symbol_table)])
        parts.append(self.data[slice(*sm.trailing_data)])
        return b"".join(parts)


def parse_prg(data: bytes, path: Optional[str] = None, decode: bool = True) -> PrgBinary:
    data = bytes(data)
    header = parse_header(data)
    subs = carve_subroutines(data, header)
    symbols = parse_symbol_table(data, header.last_subroutine_offset())
    sections = build_section_map(header, subs, symbols, len(data))
    prg = PrgBinary(data, header, subs, symbols, sections, path)
    return prg.decode() if decode else prg


def load_prg(path, decode: bool = True) -> PrgBinary:
    return parse_prg(Path(path).read_bytes(), str(path), decode)
