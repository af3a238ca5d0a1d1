"""Command-line entry point ``cellflow``.

Exit status is 0 on success; failures print a one-line JSON error record on
stderr and exit with the code from :mod:`cellflow.harness` (2 config, 3
solver, 4 probe timeout, 5 failed self-check, 1 anything else).
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import OUTPUT_ROOT_ENV, ConfigError, load_config, parse_config
from .harness import EXIT_OK, error_code, error_record, reproduce_figures, run


def _ini(sections: dict) -> str:
    lines = []
    for sec, kv in sections.items():
        lines.append(f"[{sec}]")
        lines += [f"{k} = {v}" for k, v in kv.items() if v is not None]
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cellflow", description=(
        "Tracer transport in a periodic cellular flow: Monte Carlo, cell PDE solves and "
        "analytic checks."))
    p.add_argument("--output-root", type=Path, default=None,
                   help=f"root for relative output dirs (default ${OUTPUT_ROOT_ENV} or ./cellflow_out)")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run an experiment from an INI config")
    r.add_argument("config", type=Path)

    s = sub.add_parser("selftest", help="analytic closed-form invariant suite")
    s.add_argument("--seed", type=int, default=0)

    f = sub.add_parser("figures", help="variance table, trajectories and cloud snapshots")
    f.add_argument("--paths", type=int, default=10_000)
    f.add_argument("--seed", type=int, default=2024)
    f.add_argument("--workers", type=int, default=1)

    d = sub.add_parser("pde", help="cell PDE solve")
    d.add_argument("--A", type=float, required=True)
    d.add_argument("--problem", choices=("chi", "exit", "resolvent"), required=True)
    d.add_argument("--n", type=int, default=0, help="grid points per period (0 = policy)")
    d.add_argument("--scheme", choices=("central", "upwind", "sg"), default=None)
    d.add_argument("--lambdas", type=str, default=None, help="comma-separated resolvent rates")
    d.add_argument("--N", type=float, default=1.0, help="layer width factor")
    d.add_argument("--fields", action="store_true", help="also write nodal fields")

    a = sub.add_parser("audit-supersolutions", help="exact residual audit of explicit super-solutions")
    a.add_argument("--A", type=float, action="append", required=True,
                   help="Peclet number; repeat for several")
    a.add_argument("--candidates", type=str, default=None)
    return p


def _config_for(args):
    if args.command == "run":
        return load_config(args.config)
    if args.command == "selftest":
        return parse_config(_ini({"experiment": {"kind": "bounds_selftest", "seed": args.seed,
                                                 "output_dir": "selftest"}}))
    if args.command == "pde":
        return parse_config(_ini({
            "experiment": {"kind": "cell_pde", "output_dir": f"pde_{args.problem}_A{args.A:g}"},
            "flow": {"A": args.A, "N": args.N},
            "pde": {"problem": args.problem, "n": args.n, "scheme": args.scheme,
                    "lambdas": args.lambdas, "write_fields": str(args.fields).lower()},
        }))
    if args.command == "audit-supersolutions":
        vals = ", ".join(f"{x:g}" for x in args.A)
        return parse_config(_ini({
            "experiment": {"kind": "supersolution_audit", "output_dir": "audit"},
            "audit": {"A_values": vals, "candidates": args.candidates},
        }))
    raise ConfigError(f"no config for command {args.command!r}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = None
    try:
        if args.command == "figures":
            root = args.output_root
            out = (root / "figures") if root else None
            m = reproduce_figures(out, seed=args.seed, paths=args.paths, workers=args.workers)
        else:
            cfg = _config_for(args)
            m = run(cfg, args.output_root)
    except Exception as exc:  # every failure maps to a distinct exit code
        rec = error_record(exc, cfg.config_hash() if cfg is not None else None)
        print(json.dumps(rec), file=sys.stderr)
        return error_code(exc)
    print(json.dumps({"status": m.status, "config_hash": m.config_hash,
                      "outputs": sorted(m.outputs), "summary": m.summary}, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
