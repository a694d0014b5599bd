"""Atomic delay measures and the delayed aggregates they induce on grid series."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Literal, Sequence

import numpy as np

from delaybsde.levy_paths import TimeGrid

Extension = Literal["Y", "ZU"]


@dataclass(frozen=True)
class DelayMeasure:
    """Probability measure sum_j w_j delta_{v_j} on [-T, 0]."""

    atoms: tuple[tuple[float, float], ...]

    def __post_init__(self):
        if not self.atoms:
            raise ValueError("delay measure needs at least one atom")
        merged: dict[float, float] = {}
        for v, w in self.atoms:
            v, w = float(v), float(w)
            if v > 0 or not np.isfinite(v):
                raise ValueError(f"delay atom {v} must lie in [-T, 0]")
            if not (w > 0) or not np.isfinite(w):
                raise ValueError(f"delay weight {w} must be positive")
            merged[v] = merged.get(v, 0.0) + w
        total = sum(merged.values())
        atoms = tuple((v, w / total) for v, w in sorted(merged.items()))
        object.__setattr__(self, "atoms", atoms)

    @property
    def locations(self) -> np.ndarray:
        return np.array([v for v, _ in self.atoms])

    @property
    def weights(self) -> np.ndarray:
        return np.array([w for _, w in self.atoms])

    @property
    def is_instantaneous(self) -> bool:
        return self.atoms == ((0.0, 1.0),)

    def check_horizon(self, T: float) -> None:
        if any(v < -T - 1e-12 for v, _ in self.atoms):
            raise ValueError(f"delay atoms must lie in [-{T}, 0]")

    def lags(self, grid: TimeGrid) -> np.ndarray:
        """Integer node offsets of the left-node lookup for every atom."""
        self.check_horizon(grid.T)
        return np.floor(self.locations / grid.dt + 1e-9).astype(int)

    def to_dict(self) -> dict:
        return {"type": "weighted", "atoms": [list(a) for a in self.atoms]}


def make_delay_measure(kind: str, *, v: float = 0.0, n_atoms: int = 1, gamma: float = 0.0,
                       atoms: Sequence[Sequence[float]] = (), T: float | None = None) -> DelayMeasure:
    """Build ``dirac(v)``, ``uniform(n_atoms over [-gamma, 0])`` or ``weighted(atoms)``.

    Uniform atoms sit at equally spaced points including both endpoints
    (a single atom is placed at 0).
    """
    if kind == "dirac":
        alpha = DelayMeasure(((v, 1.0),))
    elif kind == "uniform":
        if n_atoms < 1 or gamma < 0:
            raise ValueError("uniform delay needs n_atoms >= 1 and gamma >= 0")
        locs = [0.0] if n_atoms == 1 else np.linspace(-gamma, 0.0, n_atoms)
        alpha = DelayMeasure(tuple((float(x), 1.0) for x in locs))
    elif kind == "weighted":
        alpha = DelayMeasure(tuple((float(a), float(b)) for a, b in atoms))
    else:
        raise ValueError(f"unknown delay measure type {kind!r}")
    if T is not None:
        alpha.check_horizon(T)
    return alpha


def delayed_average(series: np.ndarray, t_index: int, alpha: DelayMeasure, kind: Extension,
                    grid: TimeGrid | None = None, dt: float | None = None) -> np.ndarray | float:
    """sum_j w_j x(t_i + v_j) with left-node lookup.

    ``series`` is indexed by step along its last axis (leading axes, e.g. paths,
    are carried through). Negative times read x[0] for the Y-extension and 0 for
    the ZU-extension.
    """
    if grid is not None:
        lags = alpha.lags(grid)
    elif dt is not None:
        lags = np.floor(alpha.locations / dt + 1e-9).astype(int)
    else:
        raise ValueError("need a grid or a step size")
    x = np.asarray(series, dtype=float)
    if not (0 <= t_index < x.shape[-1]):
        raise ValueError(f"t_index {t_index} out of range")
    out = np.zeros(x.shape[:-1])
    for lag, w in zip(lags, alpha.weights):
        j = t_index + lag
        if j >= 0:
            out = out + w * x[..., j]
        elif kind == "Y":
            out = out + w * x[..., 0]
        elif kind != "ZU":
            raise ValueError(f"unknown extension kind {kind!r}")
    return out if out.ndim else float(out)


def beta_weight(alpha: DelayMeasure, beta: float) -> float:
    """int e^{-beta v} alpha(dv)."""
    return float(np.sum(alpha.weights * np.exp(-beta * alpha.locations)))


def delayed_series(series: np.ndarray, alpha: DelayMeasure, kind: Extension, grid: TimeGrid,
                   n_out: int | None = None) -> np.ndarray:
    """delayed_average at every step index 0..n_out-1, along the second axis.

    Trailing axes (e.g. marks) are carried through.
    """
    x = np.asarray(series, dtype=float)
    n_out = grid.n_steps if n_out is None else n_out
    out = np.zeros((x.shape[0], n_out) + x.shape[2:])
    for lag, w in zip(alpha.lags(grid), alpha.weights):
        shifted = np.zeros_like(out)
        first = max(0, -lag)
        if first < n_out:
            shifted[:, first:] = x[:, first + lag:n_out + lag]
        if kind == "Y" and first > 0:
            shifted[:, :min(first, n_out)] = x[:, :1]
        elif kind not in ("Y", "ZU"):
            raise ValueError(f"unknown extension kind {kind!r}")
        out = out + w * shifted
    return out
