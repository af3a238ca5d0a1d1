"""Output persistence: CSV tables with sidecar metadata and a run manifest.

Every table ``name.csv`` is accompanied by ``name.csv.meta.json`` holding the
config hash and column list.  ``manifest.json`` in the same directory lists
every output with its SHA-256 checksum.  Table contents and sidecars carry
no timestamps, so identical configs reproduce identical bytes; timestamps
live in the manifest only.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

MANIFEST = "manifest.json"
META_SUFFIX = ".meta.json"


class OrphanOutputError(RuntimeError):
    """Output file without a matching sidecar, manifest entry or checksum."""


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(v):
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        return repr(v)
    if hasattr(v, "item"):
        return _fmt(v.item())
    return str(v)


@dataclass
class RunManifest:
    config_hash: str
    code_version: str
    kind: str
    started: str
    finished: str = ""
    status: str = "running"
    outputs: dict = field(default_factory=dict)
    summary: dict = field(default_factory=dict)

    def write(self, directory: Path):
        (Path(directory) / MANIFEST).write_text(json.dumps(asdict(self), indent=2, sort_keys=True,
                                                           default=_json_default))

    @classmethod
    def read(cls, directory: Path) -> "RunManifest":
        data = json.loads((Path(directory) / MANIFEST).read_text())
        return cls(**data)


def _json_default(o):
    if hasattr(o, "item"):
        return o.item()
    if hasattr(o, "tolist"):
        return o.tolist()
    return str(o)


def now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class OutputWriter:
    """Writes tables into one run directory and keeps the manifest current."""

    def __init__(self, directory, config_hash: str, kind: str):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.config_hash = config_hash
        self.manifest = RunManifest(config_hash, __version__, kind, now())

    def table(self, name: str, columns, rows, note: str = "") -> Path:
        path = self.dir / f"{name}.csv"
        n = 0
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns)
            for r in rows:
                w.writerow([_fmt(v) for v in r])
                n += 1
        meta = {"config_hash": self.config_hash, "columns": list(columns), "rows": n,
                "code_version": __version__, "note": note}
        meta_path = path.with_name(path.name + META_SUFFIX)
        meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
        self.manifest.outputs[path.name] = sha256_file(path)
        self.manifest.outputs[meta_path.name] = sha256_file(meta_path)
        return path

    def finish(self, status: str = "ok", summary: dict | None = None) -> RunManifest:
        self.manifest.status = status
        self.manifest.finished = now()
        if summary:
            self.manifest.summary.update(summary)
        self.manifest.write(self.dir)
        return self.manifest


def load_table(path, config_hash: str | None = None):
    """Read a table after validating its sidecar, manifest entry and checksum.

    Returns
    -------
    columns : list of str
    rows : list of list of str
    meta : dict

    Raises
    ------
    OrphanOutputError
        When the sidecar or manifest is missing, the file is not listed, the
        checksum differs, or the config hash differs from ``config_hash``.
    """
    path = Path(path)
    meta_path = path.with_name(path.name + META_SUFFIX)
    if not meta_path.exists():
        raise OrphanOutputError(f"{path} has no sidecar metadata")
    meta = json.loads(meta_path.read_text())
    man_path = path.parent / MANIFEST
    if not man_path.exists():
        raise OrphanOutputError(f"{path} has no manifest in its directory")
    man = RunManifest.read(path.parent)
    if path.name not in man.outputs:
        raise OrphanOutputError(f"{path} is not listed in the manifest")
    if man.outputs[path.name] != sha256_file(path):
        raise OrphanOutputError(f"{path} checksum does not match the manifest")
    if meta.get("config_hash") != man.config_hash:
        raise OrphanOutputError(f"{path} sidecar config hash differs from the manifest")
    if config_hash is not None and man.config_hash != config_hash:
        raise OrphanOutputError(f"{path} belongs to config {man.config_hash[:12]}, "
                                f"expected {config_hash[:12]}")
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        columns = next(r)
        rows = list(r)
    return columns, rows, meta
