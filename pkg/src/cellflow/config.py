"""Experiment configuration: a flat INI file with one section per concern.

Schema (all keys optional unless marked)::

    [experiment]
    kind = variance_curve        ; required, see KINDS
    seed = 12345
    paths = 1000
    workers = 1
    output_dir = fig1            ; relative to the output root

    [flow]
    A = 1000                     ; required for all kinds except bounds_selftest
    N = 1.0
    beta0 = 0.15
    beta0_prime = 0.30

    [step]
    dt_drift_frac = 0.01
    dt_layer_frac = 0.05
    dt_max = 1e-4

    [time]
    times = 0.01, 0.02, 0.04     ; explicit grid, or
    t_end = 0.04                 ; linear grid of n points ending at t_end
    n = 40

    [start]
    points = 0 0; 0.5 0.1        ; explicit list, or
    mesh = layer16

    [probe]
    target = exit_edge_region
    t_cap = 1.0

    [crossing]
    coordinate = 1
    n_values = 1, 2, 4
    alpha = 0.05
    write_events = false

    [pde]
    problem = chi                ; chi | exit | resolvent
    n = 0                        ; 0 selects the resolution policy
    scheme =                     ; default per problem
    lambdas = 16, 64, 256
    richardson = true
    write_fields = false

    [audit]
    A_values = 100, 400, 1600, 6400
    candidates = corner_g0g1, psi_plus
"""
from __future__ import annotations

import configparser
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .crossing_events import ProbeTarget
from .ensemble_stats import TimeGrid
from .flowfield import FlowParams, edge_mesh, layer16_mesh
from .sde_engine import StepPolicy

KINDS = ("variance_curve", "crossing_cdf", "exit_probe", "cell_pde", "supersolution_audit",
         "bounds_selftest")
MESHES = {"layer16": layer16_mesh, "edge15": edge_mesh}
OUTPUT_ROOT_ENV = "CELLFLOW_OUTPUT_ROOT"


class ConfigError(ValueError):
    """Malformed or inconsistent configuration."""


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "cellflow_out"))


def _floats(text: str) -> list[float]:
    return [float(x) for x in text.replace(",", " ").split()]


@dataclass
class ExperimentConfig:
    kind: str
    params: FlowParams | None = None
    policy: StepPolicy = field(default_factory=StepPolicy)
    paths: int = 1000
    times: np.ndarray | None = None
    starts: np.ndarray | None = None
    start_mesh: str | None = None
    seed: int = 12345
    output_dir: Path = Path("run")
    workers: int = 1
    options: dict = field(default_factory=dict)
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; choose from {KINDS}")
        if self.paths < 1:
            raise ConfigError("paths must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.start_mesh is not None and self.start_mesh not in MESHES:
            raise ConfigError(f"unknown start mesh {self.start_mesh!r}; known: {sorted(MESHES)}")
        if self.kind not in ("bounds_selftest", "supersolution_audit") and self.params is None:
            raise ConfigError("[flow] A is required for this experiment kind")
        if self.kind in ("variance_curve", "crossing_cdf") and self.times is None:
            raise ConfigError("[time] grid is required for this experiment kind")

    def start_points(self) -> np.ndarray:
        if self.start_mesh is not None:
            return MESHES[self.start_mesh](self.params)
        if self.starts is None:
            return np.zeros((1, 2))
        return self.starts

    def config_hash(self) -> str:
        """SHA-256 of the canonical JSON form of the parsed sections."""
        blob = json.dumps(self.source, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def describe(self) -> dict:
        return {
            "kind": self.kind,
            "flow": None if self.params is None else asdict(self.params),
            "step": asdict(self.policy),
            "paths": self.paths,
            "seed": self.seed,
            "workers": self.workers,
            "options": self.options,
        }


def _canonical(cp: configparser.ConfigParser) -> dict:
    return {s: {k: v.strip() for k, v in cp.items(s)} for s in cp.sections()}


def parse_config(text: str) -> ExperimentConfig:
    """Parse INI text into an :class:`ExperimentConfig`."""
    cp = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    if not cp.has_section("experiment") or "kind" not in cp["experiment"]:
        raise ConfigError("[experiment] kind is required")
    try:
        return _build(cp)
    except ConfigError:
        raise
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _build(cp: configparser.ConfigParser) -> ExperimentConfig:
    ex = cp["experiment"]
    get = lambda sec, key, default=None: (  # noqa: E731
        cp[sec].get(key, default) if cp.has_section(sec) else default)

    params = None
    if get("flow", "A") is not None:
        params = FlowParams(float(get("flow", "A")), float(get("flow", "N", 1.0)),
                            float(get("flow", "beta0", 0.15)),
                            float(get("flow", "beta0_prime", 0.30)))
    policy = StepPolicy(float(get("step", "dt_drift_frac", 0.01)),
                        float(get("step", "dt_layer_frac", 0.05)),
                        float(get("step", "dt_max", 1e-4)))

    times = None
    if get("time", "times"):
        times = TimeGrid(np.array(_floats(get("time", "times")))).times
    elif get("time", "t_end"):
        times = TimeGrid.linear(float(get("time", "t_end")), int(get("time", "n", 40))).times

    starts, mesh = None, get("start", "mesh")
    if get("start", "points"):
        pts = [_floats(p) for p in get("start", "points").split(";") if p.strip()]
        if any(len(p) != 2 for p in pts):
            raise ConfigError("[start] points must be 'x1 x2' pairs separated by ';'")
        starts = np.array(pts, dtype=float)

    opts: dict = {}
    target = get("probe", "target", "exit_edge_region").upper()
    if target not in ProbeTarget.__members__:
        raise ConfigError(f"unknown probe target {target.lower()!r}")
    opts["target"] = ProbeTarget[target]
    opts["t_cap"] = float(get("probe", "t_cap", 1.0))
    opts["on_timeout"] = get("probe", "on_timeout", "error")
    opts["coordinate"] = int(get("crossing", "coordinate", 1))
    if opts["coordinate"] not in (1, 2):
        raise ConfigError("[crossing] coordinate must be 1 or 2")
    opts["n_values"] = [int(x) for x in _floats(get("crossing", "n_values", "1, 2, 4"))]
    opts["alpha"] = float(get("crossing", "alpha", 0.05))
    opts["write_events"] = _bool(get("crossing", "write_events", "false"))
    opts["problem"] = get("pde", "problem", "chi")
    if opts["problem"] not in ("chi", "exit", "resolvent"):
        raise ConfigError("[pde] problem must be chi, exit or resolvent")
    opts["pde_n"] = int(get("pde", "n", 0))
    opts["scheme"] = get("pde", "scheme", "") or None
    opts["lambdas"] = _floats(get("pde", "lambdas", "")) or None
    opts["richardson"] = _bool(get("pde", "richardson", "true"))
    opts["write_fields"] = _bool(get("pde", "write_fields", "false"))
    opts["A_values"] = _floats(get("audit", "A_values", "100, 400, 1600, 6400"))
    cands = get("audit", "candidates", "")
    opts["candidates"] = [c.strip() for c in cands.split(",") if c.strip()] or None

    return ExperimentConfig(
        kind=ex["kind"].strip(),
        params=params,
        policy=policy,
        paths=int(ex.get("paths", 1000)),
        times=times,
        starts=starts,
        start_mesh=mesh,
        seed=int(ex.get("seed", 12345)),
        output_dir=Path(ex.get("output_dir", ex["kind"].strip())),
        workers=int(ex.get("workers", 1)),
        options=opts,
        source=_canonical(cp),
    )


def _bool(text) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {text!r}")


def lambda_grid(A: float, n: int = 3) -> np.ndarray:
    """Default resolvent grid spread geometrically over ``[A**0.25, A**0.75]``."""
    return np.geomspace(A**0.25, A**0.75, n) if A > 1 else np.array([1.0, 4.0, 16.0])[:n]


__all__ = ["KINDS", "MESHES", "OUTPUT_ROOT_ENV", "ConfigError", "ExperimentConfig",
           "parse_config", "load_config", "output_root", "lambda_grid"]
