"""Generators acting on the three delayed aggregates, terminal conditions,
and the Picard contraction constant.

Lipschitz constants follow the squared convention
``|f(y) - f(y')|^2 <= K (dy^2 + dz^2 + du^2)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np
from scipy.optimize import minimize_scalar

from delaybsde.delay_kernel import DelayMeasure, beta_weight
from delaybsde.levy_paths import PathEnsemble


class PathState(NamedTuple):
    """Driver values at one node: W(t) with shape (P,), M~(t, {z_k}) with shape (P, K)."""

    W: np.ndarray
    M: np.ndarray


class NumericDomainError(ValueError):
    pass


def _check_finite(*xs):
    for x in xs:
        if not np.all(np.isfinite(x)):
            raise NumericDomainError("non-finite generator input")


class Generator:
    """f(omega, t, ybar, zbar, ubar), vectorized over paths.

    Subclasses implement ``_f`` and ``_partials``; the public methods enforce
    the zero-for-negative-time convention and finite inputs.
    """

    name = "generator"
    random = False

    def __init__(self, lipschitz_K: float, partial_bound: float | None = None):
        if not (lipschitz_K > 0):
            raise ValueError("declared Lipschitz constant must be positive")
        self.lipschitz_K = float(lipschitz_K)
        self.partial_bound = float(np.sqrt(lipschitz_K) if partial_bound is None else partial_bound)

    def evaluate(self, t, y, z, u, state: PathState | None = None):
        _check_finite(t, y, z, u)
        if t < 0:
            return np.zeros_like(np.asarray(y, dtype=float) + z + u)
        return self._f(t, y, z, u, state)

    def partials(self, t, y, z, u, state: PathState | None = None):
        _check_finite(t, y, z, u)
        shape = np.shape(np.asarray(y, dtype=float) + z + u)
        if t < 0:
            return tuple(np.zeros(shape) for _ in range(3))
        return tuple(np.broadcast_to(np.asarray(d, dtype=float), shape) for d in self._partials(t, y, z, u, state))

    def omega_derivative(self, s, t, y, z, u, state: PathState | None = None):
        """D_{s,0} f at fixed aggregates; zero for deterministic generators."""
        return np.zeros(np.shape(np.asarray(y, dtype=float) + z + u))

    def _f(self, t, y, z, u, state):
        raise NotImplementedError

    def _partials(self, t, y, z, u, state):
        raise NotImplementedError

    def coefficients(self) -> dict:
        return {}

    def __repr__(self):
        args = ", ".join(f"{k}={v!r}" for k, v in self.coefficients().items())
        return f"{type(self).__name__}({args})"


class ZeroGenerator(Generator):
    name = "zero"

    def __init__(self):
        super().__init__(lipschitz_K=1e-12, partial_bound=0.0)

    def _f(self, t, y, z, u, state):
        return np.zeros(np.shape(np.asarray(y, dtype=float) + z + u))

    def _partials(self, t, y, z, u, state):
        return 0.0, 0.0, 0.0


class LinearY(Generator):
    """f = c * ybar."""

    name = "linear_y"

    def __init__(self, c: float):
        self.c = float(c)
        super().__init__(lipschitz_K=max(self.c**2, 1e-12), partial_bound=abs(self.c))

    def _f(self, t, y, z, u, state):
        return self.c * np.asarray(y, dtype=float) + 0.0 * (z + u)

    def _partials(self, t, y, z, u, state):
        return self.c, 0.0, 0.0

    def coefficients(self):
        return {"c": self.c}


class LinearZ(Generator):
    """f = c * zbar."""

    name = "linear_z"

    def __init__(self, c: float):
        self.c = float(c)
        super().__init__(lipschitz_K=max(self.c**2, 1e-12), partial_bound=abs(self.c))

    def _f(self, t, y, z, u, state):
        return self.c * np.asarray(z, dtype=float) + 0.0 * (y + u)

    def _partials(self, t, y, z, u, state):
        return 0.0, self.c, 0.0

    def coefficients(self):
        return {"c": self.c}


class Affine(Generator):
    """f = a ybar + b zbar + c ubar + d0 + d1 t + e W(t).

    The ``e`` term makes the generator random with D_{s,0} f = e 1{s <= t}.
    ``m_total`` is the total mass of m; the declared constant
    a^2 + b^2 + c^2 max(1, m_total) bounds both the aggregate-level ratio and the
    path-level inequality where ubar is a sum over marks.
    """

    name = "affine"

    def __init__(self, a=0.0, b=0.0, c=0.0, d0=0.0, d1=0.0, e=0.0, m_total: float = 1.0):
        self.a, self.b, self.c = float(a), float(b), float(c)
        self.d0, self.d1, self.e = float(d0), float(d1), float(e)
        self.m_total = float(m_total)
        K = self.a**2 + self.b**2 + self.c**2 * max(1.0, self.m_total)
        super().__init__(lipschitz_K=max(K, 1e-12), partial_bound=max(abs(self.a), abs(self.b), abs(self.c)))
        self.random = self.e != 0.0

    def _f(self, t, y, z, u, state):
        out = self.a * np.asarray(y, dtype=float) + self.b * z + self.c * u + (self.d0 + self.d1 * t)
        if self.e:
            if state is None:
                raise ValueError("affine generator with e != 0 needs the path state")
            out = out + self.e * state.W
        return out

    def _partials(self, t, y, z, u, state):
        return self.a, self.b, self.c

    def omega_derivative(self, s, t, y, z, u, state=None):
        shape = np.shape(np.asarray(y, dtype=float) + z + u)
        return np.full(shape, self.e if (self.e and s <= t) else 0.0)

    def coefficients(self):
        return {"a": self.a, "b": self.b, "c": self.c, "d0": self.d0, "d1": self.d1, "e": self.e,
                "m_total": self.m_total}


class TanhGenerator(Generator):
    """f = a tanh(ybar) + b tanh(zbar) + c tanh(ubar): smooth, bounded partials."""

    name = "tanh"

    def __init__(self, a=0.0, b=0.0, c=0.0, m_total: float = 1.0):
        self.a, self.b, self.c = float(a), float(b), float(c)
        self.m_total = float(m_total)
        K = self.a**2 + self.b**2 + self.c**2 * max(1.0, self.m_total)
        super().__init__(lipschitz_K=max(K, 1e-12), partial_bound=max(abs(self.a), abs(self.b), abs(self.c)))

    def _f(self, t, y, z, u, state):
        return self.a * np.tanh(y) + self.b * np.tanh(z) + self.c * np.tanh(u)

    def _partials(self, t, y, z, u, state):
        return (self.a / np.cosh(y) ** 2, self.b / np.cosh(z) ** 2, self.c / np.cosh(u) ** 2)

    def coefficients(self):
        return {"a": self.a, "b": self.b, "c": self.c, "m_total": self.m_total}


GENERATORS: dict[str, type[Generator]] = {
    "zero": ZeroGenerator,
    "linear_y": LinearY,
    "linear_z": LinearZ,
    "affine": Affine,
    "tanh": TanhGenerator,
}


def make_generator(name: str, m_total: float = 1.0, **coefficients) -> Generator:
    try:
        cls = GENERATORS[name]
    except KeyError:
        raise ValueError(f"unknown generator {name!r}") from None
    if cls in (Affine, TanhGenerator):
        return cls(m_total=m_total, **coefficients)
    return cls(**coefficients)


# -- terminal conditions ----------------------------------------------------


@dataclass
class TerminalCondition:
    """xi as a path functional plus its closed-form Brownian Malliavin derivative.

    The jump derivative is never supplied here: it is computed by inserting a
    jump into the paths.
    """

    name: str
    evaluate: Callable[[PathEnsemble], np.ndarray]
    d0: Callable[[PathEnsemble, float], np.ndarray] | None = None
    params: dict = field(default_factory=dict)


def _combo(a=0.0, q=0.0, b=(), r=0.0, shift=0.0):
    b = tuple(float(x) for x in b)

    def xi(ens: PathEnsemble):
        WT = ens.W[:, -1]
        out = shift + a * WT + q * WT**2
        MT = ens.M[:, -1, :]
        for k, bk in enumerate(b):
            out = out + bk * MT[:, k]
        if r:
            out = out + r * MT[:, 0] ** 2
        return out

    def d0(ens: PathEnsemble, s: float):
        return a + 2.0 * q * ens.W[:, -1]

    return xi, d0


def make_terminal(name: str, **params) -> TerminalCondition:
    """Library terminal values.

    ``zero``; ``brownian`` (scale * W(T)); ``brownian_square`` (W(T)^2);
    ``jump_sum`` (scale * M~(T, {z_mark})); ``combo`` (shift + a W + q W^2 + sum_k b_k M~_k + r M~_0^2).
    """
    if name == "zero":
        xi, d0 = _combo()
    elif name == "brownian":
        xi, d0 = _combo(a=float(params.get("scale", 1.0)))
    elif name == "brownian_square":
        xi, d0 = _combo(q=float(params.get("scale", 1.0)))
    elif name == "jump_sum":
        k = int(params.get("mark", 0))
        b = [0.0] * (k + 1)
        b[k] = float(params.get("scale", 1.0))
        xi, d0 = _combo(b=b)
    elif name == "combo":
        xi, d0 = _combo(a=float(params.get("a", 0.0)), q=float(params.get("q", 0.0)),
                        b=params.get("b", ()), r=float(params.get("r", 0.0)),
                        shift=float(params.get("shift", 0.0)))
    else:
        raise ValueError(f"unknown terminal condition {name!r}")
    return TerminalCondition(name, xi, d0, dict(params))


# -- contraction calculus ---------------------------------------------------


def contraction_delta(T: float, K: float, beta: float, alpha: DelayMeasure) -> float:
    """(8T + 1/beta) K int e^{-beta v} alpha(dv) max(1, T)."""
    if min(T, K, beta) <= 0:
        raise ValueError("T, K and beta must be positive")
    return (8.0 * T + 1.0 / beta) * K * beta_weight(alpha, beta) * max(1.0, T)


@dataclass(frozen=True)
class BetaChoice:
    beta: float
    delta: float
    saturated: bool


def optimize_beta(T: float, K: float, alpha: DelayMeasure, decades: float = 2.0, n_grid: int = 161) -> BetaChoice:
    """Minimize contraction_delta over beta: log grid around 1/T, then a bounded refine.

    ``saturated`` is set when the minimum sits at the upper end of the grid
    (the no-delay case, where delta decreases in beta forever).
    """
    grid = np.logspace(-decades, decades, n_grid) / T
    vals = np.array([contraction_delta(T, K, b, alpha) for b in grid])
    j = int(np.argmin(vals))
    if j == n_grid - 1:
        return BetaChoice(float(grid[j]), float(vals[j]), True)
    lo, hi = np.log(grid[max(j - 1, 0)]), np.log(grid[min(j + 1, n_grid - 1)])
    res = minimize_scalar(lambda lb: contraction_delta(T, K, np.exp(lb), alpha), bounds=(lo, hi),
                          method="bounded", options={"xatol": 1e-10})
    beta, delta = float(np.exp(res.x)), float(res.fun)
    if delta > vals[j]:
        beta, delta = float(grid[j]), float(vals[j])
    return BetaChoice(beta, delta, False)


@dataclass(frozen=True)
class LipschitzAudit:
    constant: float
    declared: float
    violation: bool


def empirical_lipschitz(gen: Generator, probes, t: float = 0.0, tolerance: float = 1e-9,
                        state: PathState | None = None) -> LipschitzAudit:
    """max over probe pairs of |df|^2 / (dy^2 + dz^2 + du^2).

    ``probes`` is an (n, 3) array of aggregate triples; identical pairs are skipped.
    """
    P = np.asarray(probes, dtype=float).reshape(-1, 3)
    _check_finite(P)
    f = np.asarray(gen.evaluate(t, P[:, 0], P[:, 1], P[:, 2], state), dtype=float)
    df2 = (f[:, None] - f[None, :]) ** 2
    dx2 = ((P[:, None, :] - P[None, :, :]) ** 2).sum(axis=-1)
    mask = dx2 > 0
    ratio = float(np.max(df2[mask] / dx2[mask])) if mask.any() else 0.0
    return LipschitzAudit(ratio, gen.lipschitz_K, ratio > gen.lipschitz_K * (1.0 + tolerance))
