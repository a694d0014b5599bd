"""Experiment orchestration: run, sweep, convergence study, trace, and report files."""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from delaybsde import __version__
from delaybsde.bsde_solver import (DivergenceError, NormSet, PicardReport, SolutionTriple, residual, solve)
from delaybsde.config import SCHEMA_VERSION, ConfigError, ExperimentConfig
from delaybsde.generators import (Affine, Generator, LinearY, LinearZ, ZeroGenerator,
                                  contraction_delta, optimize_beta)
from delaybsde.levy_paths import PathEnsemble, simulate_ensemble
from delaybsde.malliavin import TraceReport, derivative_bsde, derivative_points, trace_check

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_TOLERANCE = 4


# -- file output -------------------------------------------------------------------


def atomic_write(path: str | Path, data: str | bytes) -> Path:
    """Write via a temporary file in the same directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    mode = "wb" if isinstance(data, bytes) else "w"
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, mode) as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def _csv(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(x) if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def _json(obj) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, **obj}, indent=2, sort_keys=True, default=float) + "\n"


def picard_table(report: PicardReport, fmt: str) -> str:
    header = ("iteration", "gap", "ratio", "delta")
    rows = [(int(n), float(g), float(r), float(d)) for n, g, r, d in report.rows()]
    if fmt == "csv":
        return _csv(header, rows)
    return _json({"rows": [dict(zip(header, r)) for r in rows]})


def trace_table(report: TraceReport, fmt: str) -> str:
    return report.to_csv() if fmt == "csv" else report.to_json() + "\n"


# -- single run --------------------------------------------------------------------


@dataclass
class RunResult:
    config: ExperimentConfig
    solution: SolutionTriple
    report: PicardReport
    beta: float
    delta: float
    saturated: bool
    residual: float
    trace: TraceReport | None = None
    timings: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.report.converged and (self.trace is None or self.trace.all_pass)

    def norms(self) -> dict:
        ns = NormSet(self.beta)
        s, ens = self.solution, self.solution.ens
        return {"s2_Y": ns.s2(s.Y, ens), "h2_Z": ns.h2(s.Z, ens), "h2m_U": ns.h2m(s.U, ens)}

    def summary(self) -> dict:
        r = self.report
        out = {
            "converged": r.converged, "iterations": r.iterations, "delta": self.delta, "beta": self.beta,
            "beta_saturated": self.saturated, "final_gap": r.gaps[-1] if r.gaps else None,
            "non_contraction": r.non_contraction, "slack_violations": r.slack_violations,
            "residual": self.residual, "norms": self.norms(),
            "Y0_mean": float(self.solution.Y[:, 0].mean()),
        }
        if self.trace is not None:
            out["trace_all_pass"] = self.trace.all_pass
        return out


def contraction_setup(cfg: ExperimentConfig, gen: Generator) -> tuple[float, float, bool]:
    """(beta, delta, saturated) for the config, computed before any solve."""
    alpha = cfg.delay_measure()
    beta = cfg.fixed_beta()
    if beta is None:
        choice = optimize_beta(cfg.grid.T, gen.lipschitz_K, alpha)
        return choice.beta, choice.delta, choice.saturated
    return beta, contraction_delta(cfg.grid.T, gen.lipschitz_K, beta, alpha), False


def build_ensemble(cfg: ExperimentConfig) -> PathEnsemble:
    return simulate_ensemble(cfg.levy_model(), cfg.time_grid(), cfg.n_paths, cfg.master_seed)


def execute(cfg: ExperimentConfig, ens: PathEnsemble | None = None) -> RunResult:
    """simulate, solve and (optionally) the trace check; no file output."""
    timings = {}
    t0 = time.perf_counter()
    gen, xi, alpha = cfg.make_generator(), cfg.make_terminal(), cfg.delay_measure()
    beta, delta, saturated = contraction_setup(cfg, gen)
    log.info("delta = %.6g at beta = %.6g%s", delta, beta, " (saturated)" if saturated else "")
    ens = ens if ens is not None else build_ensemble(cfg)
    timings["simulate"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    sol, report = solve(ens, gen, xi, alpha, beta, cfg.solver_config())
    report.delta = delta
    timings["solve"] = time.perf_counter() - t1
    res = residual(sol, ens, gen, xi)
    trace = None
    if cfg.malliavin.enabled:
        t2 = time.perf_counter()
        trace = run_trace(cfg, sol, ens, gen, xi)
        timings["malliavin"] = time.perf_counter() - t2
    return RunResult(cfg, sol, report, beta, delta, saturated, res, trace, timings)


def run_trace(cfg: ExperimentConfig, sol: SolutionTriple, ens: PathEnsemble, gen=None, xi=None) -> TraceReport:
    gen = gen or cfg.make_generator()
    xi = xi or cfg.make_terminal()
    m = cfg.malliavin
    points = derivative_points(ens, m.stride, m.marks, m.nodes)
    derivs = [derivative_bsde(sol, ens, gen, xi, p, cfg.solver_config()) for p in points]
    return trace_check(sol, derivs, m.tolerance, m.relative)


def manifest(cfg: ExperimentConfig, delta: float, beta: float, timings: dict, outputs: list[str]) -> dict:
    return {
        "config_hash": cfg.config_hash(),
        "config": cfg.to_dict(),
        "code_version": __version__,
        "seeds": {"master_seed": cfg.master_seed},
        "delta": delta,
        "beta": beta,
        "timings": timings,
        "outputs": sorted(outputs),
    }


def write_run(result: RunResult, out_dir: str | Path, fmt: str) -> list[str]:
    out_dir = Path(out_dir)
    files = []
    ext = "csv" if fmt == "csv" else "json"
    atomic_write(out_dir / f"picard.{ext}", picard_table(result.report, fmt))
    files.append(f"picard.{ext}")
    atomic_write(out_dir / "summary.json", _json(result.summary()))
    files.append("summary.json")
    buf = io.BytesIO()
    s = result.solution
    np.savez(buf, Y=s.Y, Z=s.Z, U=s.U, beta=np.array(s.beta))
    atomic_write(out_dir / "solution.npz", buf.getvalue())
    files.append("solution.npz")
    if result.trace is not None:
        atomic_write(out_dir / f"trace.{ext}", trace_table(result.trace, fmt))
        files.append(f"trace.{ext}")
    atomic_write(out_dir / "manifest.json",
                 _json(manifest(result.config, result.delta, result.beta, result.timings, files + ["manifest.json"])))
    return files + ["manifest.json"]


def load_solution(path: str | Path, cfg: ExperimentConfig, ens: PathEnsemble | None = None) -> SolutionTriple:
    ens = ens if ens is not None else build_ensemble(cfg)
    with np.load(path) as data:
        Y, Z, U, beta = data["Y"], data["Z"], data["U"], float(data["beta"])
    if Y.shape != (ens.n_paths, ens.grid.n_steps + 1):
        raise ConfigError("stored solution does not match the configured ensemble")
    return SolutionTriple(Y, Z, U, ens, cfg.delay_measure(), beta)


# -- sweeps ------------------------------------------------------------------------

SWEEP_AXES = ("T", "K", "beta", "n_paths", "n_steps")


def scale_to_K(cfg: ExperimentConfig, K: float) -> ExperimentConfig:
    """Rescale the generator's aggregate coefficients so its Lipschitz constant becomes K."""
    gen = cfg.make_generator()
    if isinstance(gen, ZeroGenerator):
        raise ConfigError("the zero generator cannot be rescaled to a target K")
    factor = float(np.sqrt(K / gen.lipschitz_K))
    coef = dict(cfg.generator.coefficients)
    keys = ("c",) if isinstance(gen, (LinearY, LinearZ)) else ("a", "b", "c")
    for k in keys:
        if k in coef:
            coef[k] = float(coef[k]) * factor
    return replace(cfg, generator=replace(cfg.generator, coefficients=coef))


def apply_axis(cfg: ExperimentConfig, axis: str, value: float) -> ExperimentConfig:
    if axis == "T":
        return replace(cfg, grid=replace(cfg.grid, T=float(value)))
    if axis == "n_steps":
        return replace(cfg, grid=replace(cfg.grid, n_steps=int(value)))
    if axis == "n_paths":
        return replace(cfg, n_paths=int(value))
    if axis == "beta":
        return replace(cfg, beta=float(value))
    if axis == "K":
        return scale_to_K(cfg, float(value))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")


SWEEP_HEADER = ("run", "T", "K", "beta", "n_paths", "n_steps", "delta", "converged", "iterations", "final_gap",
                "status", "error")


def _sweep_point(args) -> tuple:
    idx, cfg = args
    base = (idx, cfg.grid.T)
    try:
        from delaybsde.config import validate
        validate(cfg)
        gen = cfg.make_generator()
        res = execute(replace(cfg, malliavin=replace(cfg.malliavin, enabled=False)))
        r = res.report
        return base + (gen.lipschitz_K, res.beta, cfg.n_paths, cfg.grid.n_steps, res.delta, r.converged,
                       r.iterations, r.gaps[-1] if r.gaps else float("nan"), "ok", "")
    except DivergenceError as e:
        gen = cfg.make_generator()
        beta, delta, _ = contraction_setup(cfg, gen)
        return base + (gen.lipschitz_K, beta, cfg.n_paths, cfg.grid.n_steps, delta, False, -1, float("nan"),
                       "divergence", str(e))
    except (ConfigError, ValueError) as e:
        return base + (float("nan"), float("nan"), cfg.n_paths, cfg.grid.n_steps, float("nan"), False, -1,
                       float("nan"), "error", str(e))


def sweep_configs(cfg: ExperimentConfig, axes: dict[str, Sequence[float]]) -> list[ExperimentConfig]:
    """Cartesian product of the axes, in the order given; no axes means the base run only."""
    configs = [cfg]
    for axis, values in axes.items():
        if axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {', '.join(SWEEP_AXES)}")
        configs = [apply_axis(c, axis, v) for c in configs for v in values]
    return configs


def sweep(cfg: ExperimentConfig, axes: dict[str, Sequence[float]], workers: int = 1) -> list[tuple]:
    """One run per grid point; failures are recorded per row and the sweep continues."""
    jobs = list(enumerate(sweep_configs(cfg, axes)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(_sweep_point, jobs))
    return [_sweep_point(j) for j in jobs]


def sweep_table(rows: list[tuple], fmt: str) -> str:
    if fmt == "csv":
        return _csv(SWEEP_HEADER, rows)
    return _json({"rows": [dict(zip(SWEEP_HEADER, r)) for r in rows]})


# -- convergence study --------------------------------------------------------------

Reference = Callable[[PathEnsemble], tuple[np.ndarray, np.ndarray, np.ndarray]]


def closed_form_reference(cfg: ExperimentConfig) -> Reference | None:
    """Exact (Y, Z, U) where the library knows one, else None."""
    gen, xi, alpha = cfg.make_generator(), cfg.make_terminal(), cfg.delay_measure()
    params = cfg.terminal.params
    T = cfg.grid.T

    def shapes(ens):
        P, n, K = ens.n_paths, ens.grid.n_steps, ens.model.n_marks
        return np.zeros((P, n + 1)), np.zeros((P, n)), np.zeros((P, n, K))

    if isinstance(gen, ZeroGenerator) and xi.name == "brownian":
        a = float(params.get("scale", 1.0))

        def ref(ens):
            Y, Z, U = shapes(ens)
            return a * ens.W, Z + a, U
        return ref
    if isinstance(gen, ZeroGenerator) and xi.name == "jump_sum":
        a, k = float(params.get("scale", 1.0)), int(params.get("mark", 0))

        def ref(ens):
            Y, Z, U = shapes(ens)
            U[:, :, k] = a
            return a * ens.M[:, :, k], Z, U
        return ref
    if isinstance(gen, LinearY) and alpha.is_instantaneous and xi.name == "brownian":
        a, c = float(params.get("scale", 1.0)), gen.c

        def ref(ens):
            Y, Z, U = shapes(ens)
            g = np.exp(c * (T - ens.grid.nodes))
            return a * g * ens.W, Z + a * g[:-1], U
        return ref
    if (isinstance(gen, Affine) and gen.a == gen.b == gen.c == gen.e == 0.0 and xi.name == "zero"):
        d0, d1 = gen.d0, gen.d1

        def ref(ens):
            Y, Z, U = shapes(ens)
            t = ens.grid.nodes
            f = (d0 + d1 * t[:-1]) * ens.grid.dt
            tail = np.concatenate([np.cumsum(f[::-1])[::-1], [0.0]])
            return Y + tail, Z, U
        return ref
    return None


CONVERGENCE_HEADER = ("level", "n_paths", "n_steps", "replicates", "y_rms_err", "z_rms_err", "u_rms_err", "y0",
                      "self_diff")


@dataclass
class ConvergenceTable:
    rows: list[tuple]
    has_reference: bool
    slopes: dict

    def table(self, fmt: str) -> str:
        if fmt == "csv":
            return _csv(CONVERGENCE_HEADER, self.rows)
        return _json({"rows": [dict(zip(CONVERGENCE_HEADER, r)) for r in self.rows],
                      "has_reference": self.has_reference, "slopes": self.slopes})


def convergence_study(cfg: ExperimentConfig, levels: int = 4, mode: str = "both", replicates: int = 1,
                      scheme: str | None = None) -> ConvergenceTable:
    """Repeat the run while doubling n_paths and/or n_steps from the base config.

    Level 0 is the base config. Errors against a closed form are root-mean-square
    over (replicate, path, node); without one, ``self_diff`` is |Y0(level) - Y0(level-1)|.
    ``slopes`` holds log-log fits of the errors against n_paths (mode ``paths``)
    or n_steps (mode ``steps``).
    """
    if mode not in ("both", "paths", "steps"):
        raise ConfigError(f"unknown refinement mode {mode!r}")
    ref = closed_form_reference(cfg)
    solver_cfg = cfg.solver_config(**({"scheme": scheme} if scheme else {}))
    gen, xi, alpha = cfg.make_generator(), cfg.make_terminal(), cfg.delay_measure()
    rows = []
    prev_y0 = None
    for lv in range(levels):
        n_paths = cfg.n_paths * (2**lv if mode in ("both", "paths") else 1)
        n_steps = cfg.grid.n_steps * (2**lv if mode in ("both", "steps") else 1)
        c = replace(cfg, n_paths=n_paths, grid=replace(cfg.grid, n_steps=n_steps))
        beta, _, _ = contraction_setup(c, gen)
        se = {"y": [], "z": [], "u": []}
        y0 = []
        for r in range(replicates):
            # replicate seeds are spread far apart so levels never share a stream
            ens = simulate_ensemble(c.levy_model(), c.time_grid(), n_paths, cfg.master_seed + 1_000_003 * r + lv)
            sol, _ = solve(ens, gen, xi, alpha, beta, solver_cfg)
            y0.append(float(sol.Y[:, 0].mean()))
            if ref is not None:
                Yr, Zr, Ur = ref(ens)
                se["y"].append(np.mean((sol.Y - Yr) ** 2))
                se["z"].append(np.mean((sol.Z - Zr) ** 2))
                se["u"].append(np.mean((sol.U - Ur) ** 2) if sol.U.size else 0.0)
        errs = {k: float(np.sqrt(np.mean(v))) if v else float("nan") for k, v in se.items()}
        y0m = float(np.mean(y0))
        diff = abs(y0m - prev_y0) if prev_y0 is not None else float("nan")
        prev_y0 = y0m
        rows.append((lv, n_paths, n_steps, replicates, errs["y"], errs["z"], errs["u"], y0m, diff))
    slopes = {}
    if levels >= 2 and mode != "both":
        x = np.log([r[1] if mode == "paths" else r[2] for r in rows])
        for name, col in (("y", 4), ("z", 5), ("u", 6), ("self_diff", 8)):
            vals = np.array([r[col] for r in rows], dtype=float)
            ok = np.isfinite(vals) & (vals > 0)
            if ok.sum() >= 2:
                slopes[name] = float(np.polyfit(x[ok], np.log(vals[ok]), 1)[0])
    return ConvergenceTable(rows, ref is not None, slopes)
