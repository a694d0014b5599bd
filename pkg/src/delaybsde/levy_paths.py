"""Driving noise: Brownian increments plus compound-Poisson jumps binned per step.

Every path is generated from its own seed stream keyed by ``(master_seed, path)``
so an ensemble is bit-reproducible whatever order paths are produced in.
Jump events are stored as per-step counts for each atom of the Lévy measure.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_BROWNIAN_STREAM = 0
_JUMP_STREAM = 1
_BRANCH_STREAM = 2


@dataclass(frozen=True)
class TimeGrid:
    T: float
    n_steps: int

    def __post_init__(self):
        if not np.isfinite(self.T) or self.T <= 0:
            raise ValueError(f"horizon must be positive, got {self.T}")
        if int(self.n_steps) != self.n_steps or self.n_steps < 1:
            raise ValueError(f"n_steps must be a positive integer, got {self.n_steps}")

    @property
    def dt(self) -> float:
        return self.T / self.n_steps

    @property
    def nodes(self) -> np.ndarray:
        t = np.arange(self.n_steps + 1) * self.dt
        t[-1] = self.T
        return t

    def step_of(self, t: float) -> int:
        """Index i with t in [t_i, t_{i+1}); t = T maps to the last step."""
        if not (0.0 <= t <= self.T):
            raise ValueError(f"time {t} outside [0, {self.T}]")
        i = int(np.floor(t / self.dt + 1e-9))
        return min(i, self.n_steps - 1)

    def node_of(self, t: float) -> int:
        """Index of the grid node equal to t (within rounding)."""
        i = int(round(t / self.dt))
        if not (0 <= i <= self.n_steps) or abs(i * self.dt - t) > 1e-9 * max(1.0, self.T):
            raise ValueError(f"time {t} is not a grid node")
        return i


def build_time_grid(T: float, n_steps: int) -> TimeGrid:
    return TimeGrid(float(T), int(n_steps) if int(n_steps) == n_steps else n_steps)


@dataclass(frozen=True)
class LevyModel:
    """Brownian volatility and a finite atomic Lévy measure ``nu = sum lambda_k delta_{z_k}``."""

    sigma: float = 1.0
    marks: tuple[tuple[float, float], ...] = ()

    def __post_init__(self):
        marks = tuple((float(z), float(lam)) for z, lam in self.marks)
        object.__setattr__(self, "marks", marks)
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        sizes = [z for z, _ in marks]
        if any(z == 0.0 or not np.isfinite(z) for z in sizes):
            raise ValueError("jump sizes must be finite and nonzero")
        if any(not (lam > 0.0) or not np.isfinite(lam) for _, lam in marks):
            raise ValueError("jump intensities must be positive")
        if len(set(sizes)) != len(sizes):
            raise ValueError("jump sizes must be distinct")

    @property
    def n_marks(self) -> int:
        return len(self.marks)

    @property
    def sizes(self) -> np.ndarray:
        return np.array([z for z, _ in self.marks], dtype=float)

    @property
    def intensities(self) -> np.ndarray:
        return np.array([lam for _, lam in self.marks], dtype=float)

    @property
    def m_weights(self) -> np.ndarray:
        """m({z_k}) = z_k^2 lambda_k for every atom."""
        return self.sizes**2 * self.intensities

    def to_dict(self) -> dict:
        return {"sigma": self.sigma, "marks": [list(m) for m in self.marks]}

    @classmethod
    def from_dict(cls, d: dict) -> "LevyModel":
        return cls(sigma=float(d.get("sigma", 1.0)), marks=tuple(tuple(m) for m in d.get("marks", [])))


def jump_intensity_m(model: LevyModel, mark_subset: Iterable[int] | None = None) -> float:
    """m(A) = sum over k in A of z_k^2 lambda_k; ``None`` means every mark."""
    if mark_subset is None:
        mark_subset = range(model.n_marks)
    total = 0.0
    for k in mark_subset:
        if not (0 <= k < model.n_marks):
            raise ValueError(f"unknown mark index {k}")
        z, lam = model.marks[k]
        total += z * z * lam
    return total


def _path_rng(master_seed: int, p: int, stream: int, *extra: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(p), stream, *extra))
    return np.random.Generator(np.random.PCG64(ss))


def _draw_path(model: LevyModel, grid: TimeGrid, master_seed: int, p: int):
    dt = grid.dt
    dw = _path_rng(master_seed, p, _BROWNIAN_STREAM).standard_normal(grid.n_steps) * np.sqrt(dt)
    if model.n_marks:
        rates = model.intensities * dt
        counts = _path_rng(master_seed, p, _JUMP_STREAM).poisson(rates, size=(grid.n_steps, model.n_marks))
    else:
        counts = np.zeros((grid.n_steps, 0), dtype=np.int64)
    return dw, counts.astype(np.int64)


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(eq=False)
class PathEnsemble:
    """Seeded ensemble of driver trajectories.

    ``dW`` has shape (n_paths, n_steps), ``counts`` has shape
    (n_paths, n_steps, n_marks): the number of jumps of size z_k in
    [t_i, t_{i+1}). Arrays are read-only; perturbations produce new ensembles.
    """

    grid: TimeGrid
    model: LevyModel
    n_paths: int
    master_seed: int
    dW: np.ndarray
    counts: np.ndarray
    inserted: tuple = field(default=())

    def __post_init__(self):
        _frozen(self.dW)
        _frozen(self.counts)

    @cached_property
    def W(self) -> np.ndarray:
        """Brownian path at the nodes, shape (n_paths, n_steps + 1)."""
        out = np.zeros((self.n_paths, self.grid.n_steps + 1))
        np.cumsum(self.dW, axis=1, out=out[:, 1:])
        return _frozen(out)

    @cached_property
    def dM(self) -> np.ndarray:
        """Compensated increments z_k (c - lambda_k dt), shape (n_paths, n_steps, n_marks)."""
        z = self.model.sizes
        comp = z * self.model.intensities * self.grid.dt
        return _frozen(z * self.counts - comp)

    @cached_property
    def M(self) -> np.ndarray:
        """Running compensated sums M~(t_i, {z_k}), shape (n_paths, n_steps + 1, n_marks)."""
        out = np.zeros((self.n_paths, self.grid.n_steps + 1, self.model.n_marks))
        np.cumsum(self.dM, axis=1, out=out[:, 1:, :])
        return _frozen(out)

    def path(self, p: int) -> "PathEnsemble":
        """Single-path ensemble sharing the same grid and model."""
        self._check_path(p)
        return PathEnsemble(self.grid, self.model, 1, self.master_seed,
                            self.dW[p:p + 1].copy(), self.counts[p:p + 1].copy(),
                            tuple(e for e in self.inserted if e[0] == p))

    def take(self, paths: Sequence[int]) -> "PathEnsemble":
        idx = np.asarray(paths, dtype=int)
        return PathEnsemble(self.grid, self.model, len(idx), self.master_seed,
                            self.dW[idx].copy(), self.counts[idx].copy())

    def with_jump(self, p: int | None, t: float, k: int) -> "PathEnsemble":
        """Copy with one extra mark-k jump at time t on path p (all paths if p is None).

        Only the realized count changes; the compensator is left alone.
        """
        if not (0 <= k < self.model.n_marks):
            raise ValueError(f"unknown mark index {k}")
        i = self.grid.step_of(t)
        counts = self.counts.copy()
        if p is None:
            counts[:, i, k] += 1
        else:
            self._check_path(p)
            counts[p, i, k] += 1
        return PathEnsemble(self.grid, self.model, self.n_paths, self.master_seed,
                            self.dW, counts, self.inserted + ((p, float(t), k),))

    def _check_path(self, p: int):
        if not (0 <= p < self.n_paths):
            raise ValueError(f"path index {p} out of range")

    def header(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "grid": {"T": self.grid.T, "n_steps": self.grid.n_steps},
            "n_paths": self.n_paths,
            "master_seed": self.master_seed,
            "inserted": [list(e) for e in self.inserted],
        }


def simulate_ensemble(model: LevyModel, grid: TimeGrid, n_paths: int, master_seed: int) -> PathEnsemble:
    if n_paths < 1:
        raise ValueError("n_paths must be positive")
    if master_seed < 0:
        raise ValueError("master_seed must be non-negative")
    dW = np.empty((n_paths, grid.n_steps))
    counts = np.empty((n_paths, grid.n_steps, model.n_marks), dtype=np.int64)
    for p in range(n_paths):
        dW[p], counts[p] = _draw_path(model, grid, master_seed, p)
    return PathEnsemble(grid, model, n_paths, int(master_seed), dW, counts)


def branch_ensemble(ens: PathEnsemble, p: int, i: int, n_inner: int, tag: int = 0) -> PathEnsemble:
    """``n_inner`` continuations of path p that share its increments before step i.

    Fresh increments after t_i come from a stream keyed by (master_seed, p, i, tag),
    so nested estimates are reproducible as well.
    """
    ens._check_path(p)
    n = ens.grid.n_steps
    rng = _path_rng(ens.master_seed, p, _BRANCH_STREAM, i, tag)
    dW = np.empty((n_inner, n))
    counts = np.empty((n_inner, n, ens.model.n_marks), dtype=np.int64)
    dW[:, :i] = ens.dW[p, :i]
    counts[:, :i] = ens.counts[p, :i]
    dW[:, i:] = rng.standard_normal((n_inner, n - i)) * np.sqrt(ens.grid.dt)
    if ens.model.n_marks:
        counts[:, i:] = rng.poisson(ens.model.intensities * ens.grid.dt, size=(n_inner, n - i, ens.model.n_marks))
    return PathEnsemble(ens.grid, ens.model, n_inner, ens.master_seed, dW, counts)


def compensated_increment(ens: PathEnsemble, p: int, i: int, k: int) -> float:
    """z_k c_{p,i,k} - z_k lambda_k dt."""
    if not (0 <= p < ens.n_paths and 0 <= i < ens.grid.n_steps and 0 <= k < ens.model.n_marks):
        raise ValueError(f"index (p={p}, i={i}, k={k}) out of range")
    z, lam = ens.model.marks[k]
    return z * ens.counts[p, i, k] - z * lam * ens.grid.dt


def insert_jump(ens: PathEnsemble, p: int, t: float, k: int) -> PathEnsemble:
    """omega -> omega^{t,z_k} on path p; the input ensemble is not modified."""
    return ens.with_jump(p, t, k)


def save_header(ens: PathEnsemble, path: str | Path) -> None:
    """Persist only what is needed to regenerate the ensemble."""
    Path(path).write_text(json.dumps(ens.header(), indent=2, sort_keys=True))


def load_ensemble(path: str | Path) -> PathEnsemble:
    h = json.loads(Path(path).read_text())
    grid = build_time_grid(h["grid"]["T"], h["grid"]["n_steps"])
    ens = simulate_ensemble(LevyModel.from_dict(h["model"]), grid, h["n_paths"], h["master_seed"])
    for p, t, k in h.get("inserted", []):
        ens = ens.with_jump(p, t, k)
    return ens
