"""Project documents and user configuration."""

import configparser
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .binfmt import parse_prg
from .errors import PlcrevError

PROJECT_FORMAT = "plcrev-project"
PROJECT_VERSION = 1
CONFIG_ENV = "PLCREV_CONFIG"
DEFAULT_CONFIG = Path("~/.config/plcrev/config.ini")


class ProjectError(PlcrevError):
    pass


class StaleProject(ProjectError):
    """The binary on disk no longer matches the hash recorded in the project."""


@dataclass
class Project:
    source: str
    sha256: str
    result: dict
    annotations: dict = field(default_factory=lambda: {"renames": {}, "notes": {}})

    def to_json(self) -> str:
        doc = {"format": PROJECT_FORMAT, "version": PROJECT_VERSION, "source": self.source,
               "sha256": self.sha256, "annotations": self.annotations, "result": self.result}
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Project":
        doc = json.loads(text)
        if doc.get("format") != PROJECT_FORMAT or doc.get("version") != PROJECT_VERSION:
            raise ProjectError("not a project document")
        ann = doc.get("annotations") or {}
        ann.setdefault("renames", {})
        ann.setdefault("notes", {})
        return cls(doc["source"], doc["sha256"], doc["result"], ann)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path, verify: bool = True) -> "Project":
        proj = cls.from_json(Path(path).read_text())
        if verify:
            proj.verify()
        return proj

    def read_source(self) -> bytes:
        try:
            data = Path(self.source).read_bytes()
        except OSError as exc:
            raise ProjectError(f"cannot read source binary: {exc}") from None
        if hashlib.sha256(data).hexdigest() != self.sha256:
            raise StaleProject(f"{self.source} changed since analysis; re-run analyze")
        return data

    def verify(self) -> None:
        self.read_source()

    def binary(self):
        return parse_prg(self.read_source(), path=self.source)

    @property
    def config(self) -> dict:
        return self.result.get("config", {})

    def label(self, key) -> str:
        for n in self.result["graph"]["nodes"]:
            if n["key"] == key:
                return self.annotations["renames"].get(str(key), n["label"])
        return str(key)

    def resolve(self, ref: str):
        """Node key for a name, rename or address string."""
        renames = self.annotations["renames"]
        for n in self.result["graph"]["nodes"]:
            if ref in (n["name"], n["label"], renames.get(str(n["key"]))):
                return n["key"]
        try:
            value = int(ref, 0)
        except ValueError:
            raise ProjectError(f"no subroutine named {ref!r}") from None
        for n in self.result["graph"]["nodes"]:
            if n["kind"] == "sub" and n["start"] <= value < n["end"]:
                return n["key"]
        raise ProjectError(f"no subroutine contains {value:#x}")


def from_analysis(result, source) -> Project:
    doc = json.loads(json.dumps(result.to_dict()))
    return Project(str(Path(source).resolve()), result.binary.sha256, doc)


@dataclass
class Config:
    iomap: Optional[str] = None
    db: Optional[str] = None
    image_base: int = 0
    dispatch_base: int = 0
    path: Optional[str] = None


def config_path() -> Path:
    return Path(os.environ.get(CONFIG_ENV) or DEFAULT_CONFIG).expanduser()


def load_config(path=None) -> Config:
    """INI file with a [plcrev] section; a missing file yields defaults."""
    p = Path(path).expanduser() if path else config_path()
    cfg = Config()
    if not p.is_file():
        if path or os.environ.get(CONFIG_ENV):
            raise ProjectError(f"config file {p} not found")
        return cfg
    parser = configparser.ConfigParser()
    try:
        parser.read(p)
    except configparser.Error as exc:
        raise ProjectError(f"bad config file {p}: {exc}") from None
    sec = parser["plcrev"] if parser.has_section("plcrev") else {}
    cfg.path = str(p)
    cfg.iomap = sec.get("iomap") or None
    cfg.db = sec.get("db") or None
    try:
        cfg.image_base = int(sec.get("image_base", "0"), 0)
        cfg.dispatch_base = int(sec.get("dispatch_base", "0"), 0)
    except ValueError as exc:
        raise ProjectError(f"bad config file {p}: {exc}") from None
    return cfg
