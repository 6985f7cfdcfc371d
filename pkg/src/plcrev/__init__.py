"""Reverse-engineering toolkit for CODESYS-style PRG binaries."""

from .binfmt import load_prg, parse_prg
from .errors import PlcrevError

__version__ = "0.1.0"

__all__ = ["load_prg", "parse_prg", "PlcrevError", "__version__"]
