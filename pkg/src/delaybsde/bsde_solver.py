"""Picard iteration for the time-delayed BSDE on a path ensemble.

Each Picard step freezes the generator at the previous iterate's delayed
aggregates and solves the resulting delay-free BSDE backward in time by
least-squares regression.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np

from delaybsde.delay_kernel import DelayMeasure, delayed_series
from delaybsde.generators import Generator, PathState, TerminalCondition, contraction_delta, optimize_beta
from delaybsde.levy_paths import PathEnsemble
from delaybsde.regression import (ControlFit, Fit, conditional_expectation, fit_controls, fit_joint, fit_regression,
                                  state_features)

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class SolverConfig:
    degree: int = 2
    # relative to the squared norm of the current iterate
    tol: float = 1e-14
    max_iter: int = 60
    contraction_slack: float = 0.1
    divergence_guard: float = 1e12
    # "joint": Y_{i+1} is regressed on [phi, dW phi, dM phi] at once (martingale control
    # variate); "plain": Y_{i+1} on phi alone, then Z, U from the increment
    scheme: str = "joint"
    control_estimator: str = "joint"
    # which delayed aggregates of the previous iterate enter the regression features:
    # "y" (ybar only), "all" (ybar, zbar, ubar) or "none"; "all" tends to feed
    # control-estimate noise back into the fit and can blow up
    lagged_features: str = "window"
    keep_models: bool = False


@dataclass
class SolutionTriple:
    """Y with shape (P, n+1); Z with shape (P, n); U with shape (P, n, K).

    ``start`` > 0 marks a derivative solution that is zero before node ``start``;
    ``y_extension`` is the negative-time rule used for Y in the aggregates.
    Aggregates read the triple as zero before node ``visible_from`` (defaults
    to ``start``).
    """

    Y: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    ens: PathEnsemble
    alpha: DelayMeasure
    beta: float
    start: int = 0
    y_extension: str = "Y"
    models: list | None = field(default=None, repr=False)
    visible_from: int | None = None

    @classmethod
    def zeros(cls, ens: PathEnsemble, alpha: DelayMeasure, beta: float, start: int = 0,
              y_extension: str = "Y", visible_from: int | None = None) -> "SolutionTriple":
        P, n, K = ens.n_paths, ens.grid.n_steps, ens.model.n_marks
        return cls(np.zeros((P, n + 1)), np.zeros((P, n)), np.zeros((P, n, K)), ens, alpha, beta,
                   start, y_extension, visible_from=visible_from)

    def aggregates(self):
        """(ybar, zbar, ubar), each (P, n): the alpha-averages at every step."""
        grid = self.ens.grid
        Y, Z, U = self.Y, self.Z, self.U
        v = self.start if self.visible_from is None else self.visible_from
        if v > self.start:
            Y, Z, U = Y.copy(), Z.copy(), U.copy()
            Y[:, :v], Z[:, :v], U[:, :v] = 0.0, 0.0, 0.0
        ybar = delayed_series(Y, self.alpha, self.y_extension, grid)
        zbar = delayed_series(Z, self.alpha, "ZU", grid)
        um = U @ self.ens.model.m_weights if self.ens.model.n_marks else np.zeros_like(Z)
        ubar = delayed_series(um, self.alpha, "ZU", grid)
        return ybar, zbar, ubar


# -- norms --------------------------------------------------------------------


def _weights(ens: PathEnsemble, beta: float):
    return np.exp(beta * ens.grid.nodes)


def s2_norm_paths(Y: np.ndarray, ens: PathEnsemble, beta: float) -> np.ndarray:
    return np.max(_weights(ens, beta) * Y**2, axis=1)


def h2_norm_paths(Z: np.ndarray, ens: PathEnsemble, beta: float) -> np.ndarray:
    return (_weights(ens, beta)[:-1] * Z**2).sum(axis=1) * ens.grid.dt


def h2m_norm_paths(U: np.ndarray, ens: PathEnsemble, beta: float) -> np.ndarray:
    if U.shape[-1] == 0:
        return np.zeros(U.shape[0])
    um2 = (U**2) @ ens.model.m_weights
    return (_weights(ens, beta)[:-1] * um2).sum(axis=1) * ens.grid.dt


@dataclass(frozen=True)
class NormSet:
    """beta-weighted S^2, H^2 and H^2_m norms (squared), as ensemble means."""

    beta: float

    def s2(self, Y, ens):
        return float(s2_norm_paths(Y, ens, self.beta).mean())

    def h2(self, Z, ens):
        return float(h2_norm_paths(Z, ens, self.beta).mean())

    def h2m(self, U, ens):
        return float(h2m_norm_paths(U, ens, self.beta).mean())

    def total(self, Y, Z, U, ens):
        return self.s2(Y, ens) + self.h2(Z, ens) + self.h2m(U, ens)


# -- drivers ------------------------------------------------------------------


class Driver(Protocol):
    def __call__(self, i: int, ybar: np.ndarray, zbar: np.ndarray, ubar: np.ndarray) -> np.ndarray: ...


def path_state(ens: PathEnsemble, i: int) -> PathState:
    return PathState(ens.W[:, i], ens.M[:, i, :])


@dataclass
class GeneratorDriver:
    """Evaluate a Generator at node t_i on the ensemble's own paths."""

    gen: Generator
    ens: PathEnsemble

    def __call__(self, i, ybar, zbar, ubar):
        t = self.ens.grid.nodes[i]
        state = path_state(self.ens, i) if self.gen.random else None
        return np.broadcast_to(self.gen.evaluate(t, ybar, zbar, ubar, state), ybar.shape)


def source_terms(driver: Driver, prev: SolutionTriple) -> np.ndarray:
    """Frozen generator values f(t_i, aggregates of prev) for i < n, shape (P, n).

    Steps before ``prev.visible_from`` (or ``prev.start``) get zero.
    """
    ybar, zbar, ubar = prev.aggregates()
    n = prev.ens.grid.n_steps
    out = np.zeros_like(ybar)
    first = prev.start if prev.visible_from is None else max(prev.start, prev.visible_from)
    for i in range(first, n):
        out[:, i] = driver(i, ybar[:, i], zbar[:, i], ubar[:, i])
    return out


# -- inner delay-free solve ----------------------------------------------------


@dataclass
class StepModel:
    y_fit: Fit
    controls: ControlFit


def backward_solve(ens: PathEnsemble, terminal: np.ndarray, source: np.ndarray, alpha: DelayMeasure,
                   beta: float, config: SolverConfig, extra: list | None = None, start: int = 0,
                   y_extension: str = "Y", visible_from: int | None = None) -> SolutionTriple:
    """Solve Y_i = E[Y_{i+1} | F_i] + source_i dt backward from Y_n = terminal.

    Z_i and U_i come from the increment Y_{i+1} - E[Y_{i+1} | F_i]. ``extra``
    holds per-step feature columns, each of shape (P, n). Nodes before ``start``
    are left at zero.
    """
    grid = ens.grid
    n, dt = grid.n_steps, grid.dt
    sol = SolutionTriple.zeros(ens, alpha, beta, start, y_extension, visible_from)
    sol.Y[:, n] = terminal
    models: list = [None] * n
    m = ens.model.m_weights
    split = linear_split(ens, config)
    for i in range(n - 1, start - 1, -1):
        X = state_features(ens, i, [e[:, i] for e in extra] if extra else ())
        target = sol.Y[:, i + 1]
        if config.scheme == "joint":
            fit, controls = fit_joint(X, target, ens.dW[:, i], ens.dM[:, i, :], config.degree, split)
            cond = fit.predict(X)
        elif config.scheme == "plain":
            fit = fit_regression(X, target, config.degree, split)
            cond = fit.predict(X)
            controls = fit_controls(fit.basis, X, target - cond, ens.dW[:, i], ens.dM[:, i, :], dt, m,
                                    config.control_estimator)
        else:
            raise ValueError(f"unknown scheme {config.scheme!r}")
        z, u = controls.predict(X)
        sol.Y[:, i] = cond + source[:, i] * dt
        sol.Z[:, i] = z
        sol.U[:, i, :] = u
        if config.keep_models:
            models[i] = StepModel(fit, controls)
    if config.keep_models:
        sol.models = models
    return sol


LAGGED_MODES = ("none", "y", "all", "window", "window_all")


def _window(x: np.ndarray, depth: int, negative: str) -> list[np.ndarray]:
    """Columns x[:, i - l] for l < depth, as (P, n) arrays indexed by step i."""
    n = x.shape[1] - 1 if negative == "Y" else x.shape[1]
    cols = []
    for l in range(depth):
        c = np.zeros((x.shape[0], n))
        c[:, l:] = x[:, :n - l]
        if negative == "Y":
            c[:, :l] = x[:, :1]
        cols.append(c)
    return cols


def regression_extra(prev: SolutionTriple, config: SolverConfig) -> list | None:
    """Per-step feature columns taken from the previous iterate.

    ``y`` and ``all`` add the current aggregates. ``window`` adds the previous
    iterate's Y at every node that a later aggregate will still read, which is
    the part of the delayed state that the Brownian and jump coordinates miss;
    ``window_all`` adds the Z and m-weighted U windows too.
    """
    mode = config.lagged_features
    if mode not in LAGGED_MODES:
        raise ValueError(f"unknown lagged_features mode {mode!r}")
    if mode == "none" or prev.alpha.is_instantaneous:
        return None
    if mode in ("y", "all"):
        aggs = prev.aggregates()
        return [aggs[0]] if mode == "y" else list(aggs)
    depth = int(-prev.alpha.lags(prev.ens.grid).min())
    if depth == 0:
        return None
    Y, Z, U = prev.Y, prev.Z, prev.U
    v = prev.start if prev.visible_from is None else prev.visible_from
    if v > prev.start:
        Y, Z, U = Y.copy(), Z.copy(), U.copy()
        Y[:, :v], Z[:, :v], U[:, :v] = 0.0, 0.0, 0.0
    cols = _window(Y, depth, prev.y_extension)
    if mode == "window_all":
        cols += _window(Z, depth, "ZU")
        if prev.ens.model.n_marks:
            cols += _window(U @ prev.ens.model.m_weights, depth, "ZU")
    return cols


def linear_split(ens: PathEnsemble, config: SolverConfig) -> int | None:
    """Index of the first feature that enters the basis linearly only."""
    return 1 + ens.model.n_marks if config.lagged_features.startswith("window") else None


def picard_step(prev: SolutionTriple, ens: PathEnsemble, gen: Generator | Driver, xi: TerminalCondition | np.ndarray,
                config: SolverConfig | None = None) -> SolutionTriple:
    """One Picard update: freeze the generator at ``prev`` and solve the plain BSDE."""
    config = config or SolverConfig()
    driver = GeneratorDriver(gen, ens) if isinstance(gen, Generator) else gen
    terminal = xi.evaluate(ens) if isinstance(xi, TerminalCondition) else np.asarray(xi, dtype=float)
    source = source_terms(driver, prev)
    return backward_solve(ens, terminal, source, prev.alpha, prev.beta, config, regression_extra(prev, config),
                          prev.start, prev.y_extension, prev.visible_from)


@dataclass
class PicardReport:
    gaps: list
    ratios: list
    delta: float
    beta: float
    iterations: int
    converged: bool
    non_contraction: bool = False
    slack_violations: list = field(default_factory=list)
    # gaps divided by the squared norm of the newer iterate; convergence is tested on these
    rel_gaps: list = field(default_factory=list)

    def rows(self):
        """(iteration, gap, ratio, delta) rows; ratio n is gaps[n] / gaps[n-1]."""
        return [(n, g, self.ratios[n - 1] if n > 0 else float("nan"), self.delta) for n, g in enumerate(self.gaps)]


def picard_solve(ens: PathEnsemble, driver: Driver, terminal: np.ndarray, alpha: DelayMeasure, beta: float,
                 config: SolverConfig, delta: float = float("nan"), start: int = 0,
                 y_extension: str = "Y", visible_from: int | None = None) -> tuple[SolutionTriple, PicardReport]:
    """Iterate from the zero triple until the weighted-norm gap drops below tol."""
    norms = NormSet(beta)
    prev = SolutionTriple.zeros(ens, alpha, beta, start, y_extension, visible_from)
    plain = NormSet(0.0)
    gaps: list[float] = []
    rel_gaps: list[float] = []
    converged = False
    keep = config.keep_models
    step_config = SolverConfig(**{**config.__dict__, "keep_models": False})
    for it in range(config.max_iter):
        source = source_terms(driver, prev)
        cur = backward_solve(ens, terminal, source, alpha, beta, step_config, regression_extra(prev, config),
                             start, y_extension, visible_from)
        size = max(plain.s2(cur.Y, ens), plain.h2(cur.Z, ens), plain.h2m(cur.U, ens))
        if not np.isfinite(size) or size > config.divergence_guard:
            raise DivergenceError(f"iterate norm {size:.3g} exceeds guard after {it + 1} Picard steps")
        gaps.append(norms.total(cur.Y - prev.Y, cur.Z - prev.Z, cur.U - prev.U, ens))
        scale = norms.total(cur.Y, cur.Z, cur.U, ens)
        rel_gaps.append(gaps[-1] / scale if scale > 0 else 0.0)
        prev = cur
        if rel_gaps[-1] <= config.tol:
            converged = True
            break
    if keep:
        # refit once more on the converged aggregates so the stored models are the final ones
        source = source_terms(driver, prev)
        final = backward_solve(ens, terminal, source, alpha, beta, config, regression_extra(prev, config),
                               start, y_extension, visible_from)
        prev.models = final.models
    ratios = [gaps[j + 1] / gaps[j] if gaps[j] > 0 else 0.0 for j in range(len(gaps) - 1)]
    report = PicardReport(gaps, ratios, delta, beta, len(gaps) - 1, converged, rel_gaps=rel_gaps)
    if np.isfinite(delta) and delta < 1:
        report.slack_violations = [j + 1 for j, r in enumerate(ratios) if r > delta + config.contraction_slack]
    if not converged and not (delta < 1):
        report.non_contraction = True
        log.warning("Picard iteration did not converge in %d steps; delta = %.3g >= 1 (no contraction guarantee)",
                    config.max_iter, delta)
    return prev, report


def solve(ens: PathEnsemble, gen: Generator, xi: TerminalCondition, alpha: DelayMeasure, beta: float | None = None,
          config: SolverConfig | None = None) -> tuple[SolutionTriple, PicardReport]:
    """Solve the delayed BSDE; beta=None picks the beta minimizing the contraction constant."""
    config = config or SolverConfig()
    T = ens.grid.T
    alpha.check_horizon(T)
    if beta is None:
        choice = optimize_beta(T, gen.lipschitz_K, alpha)
        beta, delta = choice.beta, choice.delta
    else:
        delta = contraction_delta(T, gen.lipschitz_K, beta, alpha)
    log.info("contraction constant delta = %.4g at beta = %.4g", delta, beta)
    return picard_solve(ens, GeneratorDriver(gen, ens), xi.evaluate(ens), alpha, beta, config, delta)


# -- diagnostics ----------------------------------------------------------------


def defects(sol: SolutionTriple, driver: Driver) -> np.ndarray:
    """One-step defects Y_{i+1} - Y_i + f_i dt - Z_i dW_i - sum_k U_ik dM_ik, shape (P, n)."""
    ens = sol.ens
    f = source_terms(driver, sol)
    noise = sol.Z * ens.dW + (sol.U * ens.dM).sum(axis=-1)
    d = sol.Y[:, 1:] - sol.Y[:, :-1] + f * ens.grid.dt - noise
    d[:, :sol.start] = 0.0
    return d


def residual(sol: SolutionTriple, ens: PathEnsemble, gen: Generator | Driver, xi: TerminalCondition | None = None) -> float:
    """Mean over (path, step) of the squared one-step defect."""
    driver = GeneratorDriver(gen, ens) if isinstance(gen, Generator) else gen
    d = defects(sol, driver)
    if xi is not None and not np.array_equal(sol.Y[:, -1], xi.evaluate(ens)):
        raise ValueError("solution terminal value does not match xi")
    return float(np.mean(d[:, sol.start:] ** 2))


@dataclass
class AprioriReport:
    lhs_p1: float
    rhs_p1: float
    lhs_p2: float
    rhs_p2: float
    se_p1: float
    se_p2: float

    @property
    def margin_p1(self):
        return self.rhs_p1 - self.lhs_p1

    @property
    def margin_p2(self):
        return self.rhs_p2 - self.lhs_p2

    @property
    def holds(self) -> bool:
        return self.margin_p1 >= -4 * self.se_p1 and self.margin_p2 >= -4 * self.se_p2


def apriori_check(sol_a: SolutionTriple, sol_b: SolutionTriple, gen_a: Generator, gen_b: Generator,
                  beta: float) -> AprioriReport:
    """Both sides of the two a-priori estimates, from per-path contributions.

    Terminal values are read from Y at T (terminal exactness); generator values
    are taken at each solution's own delayed aggregates.
    """
    ens = sol_a.ens
    if sol_b.ens.n_paths != ens.n_paths:
        raise ValueError("solutions must live on the same ensemble")
    T, dt = ens.grid.T, ens.grid.dt
    dxi2 = (sol_a.Y[:, -1] - sol_b.Y[:, -1]) ** 2
    fa = source_terms(GeneratorDriver(gen_a, ens), sol_a)
    fb = source_terms(GeneratorDriver(gen_b, sol_b.ens), sol_b)
    fint = (_weights(ens, beta)[:-1] * (fa - fb) ** 2).sum(axis=1) * dt
    l1 = h2_norm_paths(sol_a.Z - sol_b.Z, ens, beta) + h2m_norm_paths(sol_a.U - sol_b.U, ens, beta)
    r1 = np.exp(beta * T) * dxi2 + fint / beta
    l2 = s2_norm_paths(sol_a.Y - sol_b.Y, ens, beta)
    r2 = 8 * np.exp(beta * T) * dxi2 + 8 * T * fint

    def se(a, b):
        P = len(a)
        return float(np.sqrt(a.var(ddof=1) / P + b.var(ddof=1) / P)) if P > 1 else 0.0

    return AprioriReport(float(l1.mean()), float(r1.mean()), float(l2.mean()), float(r2.mean()),
                         se(l1, r1), se(l2, r2))


__all__ = [
    "AprioriReport", "DivergenceError", "GeneratorDriver", "NormSet", "PicardReport", "SolutionTriple",
    "SolverConfig", "apriori_check", "backward_solve", "conditional_expectation", "defects", "picard_solve",
    "picard_step", "residual", "solve", "source_terms",
]
