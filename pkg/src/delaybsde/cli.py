"""Command line: ``delaybsde {run,sweep,converge,trace}``.

Exit codes: 0 success, 2 configuration error, 3 solver divergence,
4 tolerance failure (Picard not converged or a trace check failed).
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from delaybsde.bsde_solver import DivergenceError
from delaybsde.config import ConfigError, ExperimentConfig, load_config
from delaybsde.experiments import (EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_OK, EXIT_TOLERANCE, atomic_write,
                                   build_ensemble, convergence_study, execute, load_solution, run_trace,
                                   sweep, sweep_table, trace_table, write_run)

log = logging.getLogger("delaybsde")


def _parse_axis(text: str) -> tuple[str, list[float]]:
    name, sep, values = text.partition("=")
    if not sep or not values.strip():
        raise ConfigError(f"sweep axis must look like NAME=v1,v2,... (got {text!r})")
    try:
        return name.strip(), [float(v) for v in values.split(",")]
    except ValueError as e:
        raise ConfigError(f"bad value in sweep axis {text!r}") from e


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed_override is not None:
        cfg = cfg.with_seed(args.seed_override)
    if args.format is not None:
        cfg = replace(cfg, output=replace(cfg.output, format=args.format))
    return cfg


def _out_dir(args, cfg: ExperimentConfig) -> Path:
    return Path(args.out) if args.out else Path(cfg.output.dir)


def cmd_run(args) -> int:
    cfg = _load(args)
    result = execute(cfg)
    files = write_run(result, _out_dir(args, cfg), cfg.output.format)
    r = result.report
    print(f"delta={result.delta:.6g} beta={result.beta:.6g} converged={r.converged} iterations={r.iterations} "
          f"residual={result.residual:.3e}")
    if result.trace is not None:
        print(f"trace all_pass={result.trace.all_pass}")
    print("wrote " + ", ".join(files))
    return EXIT_OK if result.ok else EXIT_TOLERANCE


def cmd_sweep(args) -> int:
    cfg = _load(args)
    axes = dict(_parse_axis(a) for a in args.axis or [])
    rows = sweep(cfg, axes, workers=args.workers)
    ext = cfg.output.format
    path = atomic_write(_out_dir(args, cfg) / f"sweep.{ext}", sweep_table(rows, ext))
    print(sweep_table(rows, "csv"), end="")
    print(f"wrote {path}")
    return EXIT_OK


def cmd_converge(args) -> int:
    cfg = _load(args)
    table = convergence_study(cfg, levels=args.levels, mode=args.mode, replicates=args.replicates,
                              scheme=args.scheme)
    ext = cfg.output.format
    path = atomic_write(_out_dir(args, cfg) / f"convergence.{ext}", table.table(ext))
    print(table.table("csv"), end="")
    if table.slopes:
        print("slopes: " + ", ".join(f"{k}={v:.3f}" for k, v in sorted(table.slopes.items())))
    print(f"wrote {path}")
    return EXIT_OK


def cmd_trace(args) -> int:
    cfg = _load(args)
    sol_path = Path(args.solution) if args.solution else Path(args.config).parent / "solution.npz"
    if not sol_path.exists():
        raise ConfigError(f"no stored solution at {sol_path}")
    ens = build_ensemble(cfg)
    sol = load_solution(sol_path, cfg, ens)
    report = run_trace(cfg, sol, ens)
    ext = cfg.output.format
    path = atomic_write(_out_dir(args, cfg) / f"trace.{ext}", trace_table(report, ext))
    print(f"trace all_pass={report.all_pass}; wrote {path}")
    return EXIT_OK if report.all_pass else EXIT_TOLERANCE


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="delaybsde", description="Time-delayed BSDEs with jumps on a Monte Carlo grid.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp):
        sp.add_argument("--config", required=True, help="YAML config or a run manifest.json")
        sp.add_argument("--out", help="output directory (default: output.dir from the config)")
        sp.add_argument("--seed-override", type=int, help="replace master_seed")
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--format", choices=("csv", "json"))

    sp = sub.add_parser("run", help="simulate, solve, optionally trace-check, write reports")
    common(sp)
    sp.set_defaults(func=cmd_run)

    sp = sub.add_parser("sweep", help="one run per grid point over T, K, beta, n_paths, n_steps")
    common(sp)
    sp.add_argument("--axis", action="append", metavar="NAME=v1,v2", help="sweep axis; repeat for a product grid")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("converge", help="refinement table over doubling n_paths and/or n_steps")
    common(sp)
    sp.add_argument("--levels", type=int, default=4)
    sp.add_argument("--mode", choices=("both", "paths", "steps"), default="both")
    sp.add_argument("--replicates", type=int, default=1)
    sp.add_argument("--scheme", choices=("joint", "plain"))
    sp.set_defaults(func=cmd_converge)

    sp = sub.add_parser("trace", help="Malliavin trace check on a stored solution")
    common(sp)
    sp.add_argument("--solution", help="solution.npz (default: next to the manifest given as --config)")
    sp.set_defaults(func=cmd_trace)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as e:
        print(f"divergence: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE


if __name__ == "__main__":
    sys.exit(main())
