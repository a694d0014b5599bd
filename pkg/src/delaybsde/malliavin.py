"""Malliavin gradients of the solution, by derivative BSDEs and by jump insertion.

The jump-direction derivative of a path functional is the increment quotient
``Psi_{s,z} H = (H(omega^{s,z}) - H(omega)) / z``, computed by adding a jump of
size z to the binned counts. Derivative BSDEs are solved with the same Picard
machinery as the base equation, restricted to [s, T] and zero before s.

Grid convention: a jump inserted at a node s = t_j falls in step j and first
shows in M~ at node j + 1; a Brownian perturbation at s likewise moves dW_j
only. Everything at node j is therefore unperturbed as far as the generator is
concerned: a derivative solution enters its own aggregates from node j + 1
on, and its source vanishes at step j. Its value at node j is the
t_j-measurable projection E[Y^{s,z}(t_{j+1}) | F_{t_j}], which is what the trace
identities compare against Z and U.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from delaybsde.bsde_solver import (GeneratorDriver, PicardReport, SolutionTriple, SolverConfig, path_state,
                                   picard_solve, regression_extra, solve, source_terms)
from delaybsde.delay_kernel import DelayMeasure
from delaybsde.generators import Generator, TerminalCondition, contraction_delta
from delaybsde.levy_paths import PathEnsemble
from delaybsde.regression import state_features

BROWNIAN = "brownian"

PathFunctional = Callable[[PathEnsemble], np.ndarray]


class ConfigurationError(ValueError):
    pass


# -- the increment quotient --------------------------------------------------


def picard_difference(H: PathFunctional, ens: PathEnsemble, p: int, s: float, k: int) -> float:
    """(H(omega^{s,z_k}) - H(omega)) / z_k on path p."""
    single = ens.path(p)
    z = ens.model.sizes[k]
    return float((np.asarray(H(single.with_jump(0, s, k)))[0] - np.asarray(H(single))[0]) / z)


def psi(H: PathFunctional, ens: PathEnsemble, s: float, k: int) -> np.ndarray:
    """Psi_{s,z_k} H on every path at once."""
    z = ens.model.sizes[k]
    return (np.asarray(H(ens.with_jump(None, s, k)), dtype=float) - np.asarray(H(ens), dtype=float)) / z


# -- derivative points and solutions ---------------------------------------------


@dataclass(frozen=True)
class DerivativePoint:
    """(s, mark) index of D_{s,z}: mark is ``"brownian"`` (z = 0) or a jump-mark index."""

    s: float
    mark: str | int = BROWNIAN

    @property
    def is_brownian(self) -> bool:
        return self.mark == BROWNIAN

    def node(self, ens: PathEnsemble) -> int:
        j = ens.grid.node_of(self.s)
        if not self.is_brownian:
            if not (isinstance(self.mark, (int, np.integer)) and 0 <= self.mark < ens.model.n_marks):
                raise ValueError(f"unknown mark {self.mark!r}")
            if j == ens.grid.n_steps:
                raise ValueError("a jump point needs s < T")
        elif j > ens.grid.n_steps:
            raise ValueError(f"s = {self.s} beyond the horizon")
        return j

    def label(self) -> str:
        return BROWNIAN if self.is_brownian else f"z{self.mark}"


def derivative_points(ens: PathEnsemble, stride: int = 1, marks: Iterable[str | int] = (BROWNIAN,),
                      nodes: Sequence[int] | None = None) -> list[DerivativePoint]:
    """Sub-grid of derivative points: every ``stride``-th node below T (or the given nodes), for each mark."""
    if nodes is None:
        nodes = range(0, ens.grid.n_steps, stride)
    t = ens.grid.nodes
    return [DerivativePoint(float(t[j]), mk) for mk in marks for j in nodes]


@dataclass
class DerivativeSolution:
    point: DerivativePoint
    triple: SolutionTriple
    report: PicardReport
    zero_before_s: bool = True

    @property
    def start(self) -> int:
        return self.triple.start

    def check_zero_before_s(self) -> bool:
        j = self.start
        t = self.triple
        return bool(not np.any(t.Y[:, :j]) and not np.any(t.Z[:, :j]) and not np.any(t.U[:, :j]))


# -- derivative generators ---------------------------------------------------------


@dataclass
class BrownianDerivativeDriver:
    """D_{s,0} f + f_y ybar^s + f_z zbar^s + f_u ubar^s with partials frozen at the base aggregates."""

    omega: np.ndarray
    fy: np.ndarray
    fz: np.ndarray
    fu: np.ndarray

    @classmethod
    def build(cls, gen: Generator, base: SolutionTriple, s: float) -> "BrownianDerivativeDriver":
        ens = base.ens
        ybar, zbar, ubar = base.aggregates()
        shape = ybar.shape
        omega, fy, fz, fu = (np.zeros(shape) for _ in range(4))
        nodes = ens.grid.nodes
        for i in range(ens.grid.n_steps):
            state = path_state(ens, i) if gen.random else None
            parts = gen.partials(nodes[i], ybar[:, i], zbar[:, i], ubar[:, i], state)
            fy[:, i], fz[:, i], fu[:, i] = parts
            omega[:, i] = gen.omega_derivative(s, nodes[i], ybar[:, i], zbar[:, i], ubar[:, i], state)
        return cls(omega, fy, fz, fu)

    def __call__(self, i, ybar, zbar, ubar):
        return self.omega[:, i] + self.fy[:, i] * ybar + self.fz[:, i] * zbar + self.fu[:, i] * ubar


@dataclass
class JumpDerivativeDriver:
    """[f(omega^{s,z}, z agg^{s,z} + agg) - f(omega, agg)] / z."""

    z: float
    base_aggs: tuple
    base_f: np.ndarray
    perturbed: GeneratorDriver

    @classmethod
    def build(cls, gen: Generator, base: SolutionTriple, s: float, k: int) -> "JumpDerivativeDriver":
        ens = base.ens
        aggs = base.aggregates()
        base_f = source_terms(GeneratorDriver(gen, ens), base)
        pert = ens.with_jump(None, s, k) if gen.random else ens
        return cls(float(ens.model.sizes[k]), aggs, base_f, GeneratorDriver(gen, pert))

    def __call__(self, i, ybar, zbar, ubar):
        yb, zb, ub = (a[:, i] for a in self.base_aggs)
        z = self.z
        return (self.perturbed(i, z * ybar + yb, z * zbar + zb, z * ubar + ub) - self.base_f[:, i]) / z


def _delta(gen: Generator, base: SolutionTriple) -> float:
    return contraction_delta(base.ens.grid.T, gen.lipschitz_K, base.beta, base.alpha)


def brownian_derivative_bsde(base: SolutionTriple, ens: PathEnsemble, gen: Generator, xi: TerminalCondition,
                             s: float, config: SolverConfig | None = None) -> DerivativeSolution:
    """Solve for (Y^{s,0}, Z^{s,0}, U^{s,0}) on [s, T], zero before s."""
    if xi.d0 is None:
        raise ConfigurationError(f"terminal condition {xi.name!r} has no Brownian derivative")
    point = DerivativePoint(float(s), BROWNIAN)
    j = point.node(ens)
    terminal = np.broadcast_to(np.asarray(xi.d0(ens, s), dtype=float), (ens.n_paths,)).copy()
    driver = BrownianDerivativeDriver.build(gen, base, s)
    triple, report = picard_solve(ens, driver, terminal, base.alpha, base.beta, config or SolverConfig(),
                                  _delta(gen, base), start=j, y_extension="ZU", visible_from=j + 1)
    return DerivativeSolution(point, triple, report)


def jump_derivative_bsde(base: SolutionTriple, ens: PathEnsemble, gen: Generator, xi: TerminalCondition,
                         s: float, k: int, config: SolverConfig | None = None) -> DerivativeSolution:
    """Solve for (Y^{s,z_k}, Z^{s,z_k}, U^{s,z_k}) on [s, T] with terminal Psi_{s,z_k} xi."""
    point = DerivativePoint(float(s), int(k))
    j = point.node(ens)
    terminal = psi(xi.evaluate, ens, s, k)
    driver = JumpDerivativeDriver.build(gen, base, s, k)
    triple, report = picard_solve(ens, driver, terminal, base.alpha, base.beta, config or SolverConfig(),
                                  _delta(gen, base), start=j, y_extension="ZU", visible_from=j + 1)
    return DerivativeSolution(point, triple, report)


def derivative_bsde(base: SolutionTriple, ens: PathEnsemble, gen: Generator, xi: TerminalCondition,
                    point: DerivativePoint, config: SolverConfig | None = None) -> DerivativeSolution:
    if point.is_brownian:
        return brownian_derivative_bsde(base, ens, gen, xi, point.s, config)
    return jump_derivative_bsde(base, ens, gen, xi, point.s, int(point.mark), config)


# -- re-solving on a perturbed path ------------------------------------------------


def _replay(base: SolutionTriple, ens1: PathEnsemble, gen: Generator, xi: TerminalCondition,
            config: SolverConfig, max_sweeps: int = 200) -> np.ndarray:
    """Y on a single path, reusing the base regression models instead of refitting."""
    if base.models is None:
        raise ValueError("reusing models needs a base solution solved with keep_models=True")
    n, dt = ens1.grid.n_steps, ens1.grid.dt
    driver = GeneratorDriver(gen, ens1)
    cur = SolutionTriple.zeros(ens1, base.alpha, base.beta)
    cur.Y[:, n] = xi.evaluate(ens1)
    for _ in range(max_sweeps):
        src = source_terms(driver, cur)
        extra = regression_extra(cur, config)
        nxt = SolutionTriple.zeros(ens1, base.alpha, base.beta)
        nxt.Y[:, n] = cur.Y[:, n]
        for i in range(n - 1, -1, -1):
            X = state_features(ens1, i, [e[:, i] for e in extra] if extra else ())
            model = base.models[i]
            nxt.Y[:, i] = model.y_fit.predict(X) + src[:, i] * dt
            nxt.Z[:, i], nxt.U[:, i, :] = model.controls.predict(X)
        done = np.max(np.abs(nxt.Y - cur.Y)) <= 1e-13 * (1.0 + np.max(np.abs(nxt.Y)))
        cur = nxt
        if done:
            break
    return cur.Y[0]


def resolve_on_perturbed(ens: PathEnsemble, gen: Generator, xi: TerminalCondition, alpha: DelayMeasure, p: int,
                         s: float, k: int, beta: float | None = None, config: SolverConfig | None = None,
                         base: SolutionTriple | None = None, reuse_models: bool = False) -> np.ndarray:
    """(Y(omega^{s,z_k}) - Y(omega)) / z_k on path p at every node.

    By default the whole problem is re-solved with path p perturbed, so the
    regressions are refitted (a single path moves the coefficients by
    O(1/n_paths)). ``reuse_models`` instead replays the base regression models
    on the perturbed path.
    """
    config = config or SolverConfig()
    if base is None:
        base_config = SolverConfig(**{**config.__dict__, "keep_models": reuse_models})
        base, _ = solve(ens, gen, xi, alpha, beta, base_config)
    z = ens.model.sizes[k]
    pert = ens.with_jump(p, s, k)
    if reuse_models:
        y_base = _replay(base, ens.path(p), gen, xi, config)
        y_pert = _replay(base, pert.path(p), gen, xi, config)
        return (y_pert - y_base) / z
    sol, _ = solve(pert, gen, xi, alpha, base.beta, config)
    return (sol.Y[p] - base.Y[p]) / z


# -- estimator agreement ---------------------------------------------------------------


@dataclass
class AgreementRow:
    s: float
    mark: int
    t: float
    mean_bsde: float
    mean_resolve: float
    se_bsde: float
    se_resolve: float
    passed: bool

    @property
    def z_score(self) -> float:
        se = np.hypot(self.se_bsde, self.se_resolve)
        diff = abs(self.mean_bsde - self.mean_resolve)
        return diff / se if se > 0 else (0.0 if diff <= 1e-12 else float("inf"))


def estimator_agreement(ensembles: Iterable[PathEnsemble], gen: Generator, xi: TerminalCondition,
                        alpha: DelayMeasure, points: Sequence[tuple[float, int]], paths: Sequence[int] = range(5),
                        config: SolverConfig | None = None, n_sigma: float = 4.0,
                        reuse_models: bool = False) -> list[AgreementRow]:
    """jump_derivative_bsde against resolve_on_perturbed, pooled over ensembles and sampled paths.

    For each derivative point (s, k) and node t > s the two estimators of
    D_{s,z_k} Y(t) are averaged over (ensemble, path) pairs; they agree when the
    means differ by at most ``n_sigma`` combined standard errors. Nodes t <= s
    are skipped: a jump inserted at a node first shows one node later.
    """
    config = config or SolverConfig()
    pooled: dict[tuple, tuple[list, list]] = {}
    grid = None
    for ens in ensembles:
        grid = ens.grid
        base, _ = solve(ens, gen, xi, alpha, None, SolverConfig(**{**config.__dict__, "keep_models": reuse_models}))
        for s, k in points:
            d = jump_derivative_bsde(base, ens, gen, xi, s, k, config)
            j = d.start
            for p in paths:
                r = resolve_on_perturbed(ens, gen, xi, alpha, p, s, k, config=config, base=base,
                                         reuse_models=reuse_models)
                for i in range(j + 1, grid.n_steps + 1):
                    a, b = pooled.setdefault((s, k, i), ([], []))
                    a.append(d.triple.Y[p, i])
                    b.append(r[i])
    rows = []
    for (s, k, i), (a, b) in sorted(pooled.items()):
        a, b = np.asarray(a), np.asarray(b)
        se_a = float(a.std(ddof=1) / np.sqrt(len(a))) if len(a) > 1 else 0.0
        se_b = float(b.std(ddof=1) / np.sqrt(len(b))) if len(b) > 1 else 0.0
        row = AgreementRow(float(s), int(k), float(grid.nodes[i]), float(a.mean()), float(b.mean()), se_a, se_b,
                           False)
        row.passed = bool(row.z_score <= n_sigma)
        rows.append(row)
    return rows


# -- trace identities --------------------------------------------------------------


@dataclass
class TraceRow:
    s: float
    mark: str
    t: float
    lhs_rms: float
    rhs_rms: float
    discrepancy: float
    passed: bool


@dataclass
class TraceReport:
    rows: list[TraceRow]
    tolerance: float
    relative: bool
    schema_version: int = field(default=1)

    @property
    def all_pass(self) -> bool:
        return all(r.passed for r in self.rows)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["s", "mark", "t", "lhs_rms", "rhs_rms", "discrepancy", "pass"])
        for r in self.rows:
            w.writerow([repr(r.s), r.mark, repr(r.t), repr(r.lhs_rms), repr(r.rhs_rms), repr(r.discrepancy),
                        int(r.passed)])
        return buf.getvalue()

    def to_json(self) -> str:
        return json.dumps({"schema_version": self.schema_version, "tolerance": self.tolerance,
                           "relative": self.relative, "all_pass": self.all_pass,
                           "rows": [asdict(r) for r in self.rows]}, indent=2, sort_keys=True)


def _rms(x) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def trace_check(base: SolutionTriple, derivatives: Iterable[DerivativeSolution], tolerance: float = 0.05,
                relative: bool = False) -> TraceReport:
    """Compare Z(t) with Y^{t,0}(t) and U(t, z_k) with Y^{t,z_k}(t) at each sampled node.

    Both sides are t-measurable regression outputs. With ``relative`` the
    discrepancy is divided by the RMS of the derivative side.
    """
    rows = []
    for d in derivatives:
        i = d.start
        if i >= base.ens.grid.n_steps:
            continue
        lhs = base.Z[:, i] if d.point.is_brownian else base.U[:, i, int(d.point.mark)]
        rhs = d.triple.Y[:, i]
        disc = _rms(lhs - rhs)
        if relative:
            scale = _rms(rhs)
            disc = disc / scale if scale > 0 else (0.0 if disc == 0 else float("inf"))
        rows.append(TraceRow(d.point.s, d.point.label(), float(base.ens.grid.nodes[i]), _rms(lhs), _rms(rhs),
                             disc, bool(disc <= tolerance)))
    return TraceReport(rows, tolerance, relative)


__all__ = [
    "AgreementRow", "BROWNIAN", "estimator_agreement", "BrownianDerivativeDriver", "ConfigurationError", "DerivativePoint", "DerivativeSolution",
    "JumpDerivativeDriver", "TraceReport", "TraceRow", "brownian_derivative_bsde", "derivative_bsde",
    "derivative_points", "jump_derivative_bsde", "picard_difference", "psi", "resolve_on_perturbed",
    "trace_check",
]
