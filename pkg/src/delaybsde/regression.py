"""Least-squares Monte Carlo conditional expectations on a path ensemble."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from itertools import combinations_with_replacement
from typing import Callable, Sequence

import numpy as np

from delaybsde.levy_paths import PathEnsemble, branch_ensemble


class RankDeficiencyWarning(UserWarning):
    pass


@dataclass
class PolyBasis:
    """Monomials up to ``degree`` in standardized features.

    Constant features are dropped, and so is any feature whose standardized
    residual against the features kept before it is below ``collinear_tol``
    (lagged aggregates are often near-exact functions of each other).
    Columns from ``linear_from`` on enter with degree one only.
    """

    mean: np.ndarray
    scale: np.ndarray
    keep: np.ndarray
    degree: int
    terms: list

    @classmethod
    def fit(cls, X: np.ndarray, degree: int, collinear_tol: float = 1e-4,
            linear_from: int | None = None) -> "PolyBasis":
        X = np.atleast_2d(X)
        mean = X.mean(axis=0)
        scale = X.std(axis=0)
        keep = scale > 1e-10 * (1.0 + np.abs(mean))
        kept: list[np.ndarray] = []
        for j in np.flatnonzero(keep):
            col = (X[:, j] - mean[j]) / scale[j]
            if kept:
                Q = np.column_stack(kept)
                col = col - Q @ (Q.T @ col)
            r = np.linalg.norm(col) / np.sqrt(X.shape[0])
            if r < collinear_tol:
                keep[j] = False
            else:
                kept.append(col / (r * np.sqrt(X.shape[0])))
        split = X.shape[1] if linear_from is None else linear_from
        n_poly = int(keep[:split].sum())
        n_feat = int(keep.sum())
        terms = [()]
        for d in range(1, degree + 1):
            terms.extend(combinations_with_replacement(range(n_poly), d))
        if degree >= 1:
            terms.extend((j,) for j in range(n_poly, n_feat))
        return cls(mean, np.where(keep, scale, 1.0), keep, degree, terms)

    def __call__(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        S = ((X - self.mean) / self.scale)[:, self.keep]
        cols = []
        for term in self.terms:
            col = np.ones(X.shape[0])
            for j in term:
                col = col * S[:, j]
            cols.append(col)
        return np.column_stack(cols)

    @property
    def n_terms(self) -> int:
        return len(self.terms)


def state_features(ens: PathEnsemble, i: int, extra: Sequence[np.ndarray] = ()) -> np.ndarray:
    """W(t_i), the running compensated sums at t_i, then any extra per-path columns."""
    cols = [ens.W[:, i]] + [ens.M[:, i, k] for k in range(ens.model.n_marks)]
    cols.extend(np.asarray(e, dtype=float) for e in extra)
    return np.column_stack(cols)


def _lstsq(A: np.ndarray, b: np.ndarray):
    coef, _, rank, _ = np.linalg.lstsq(A, b, rcond=None)
    return coef, rank


@dataclass
class Fit:
    """A fitted regression of one target on a polynomial basis."""

    basis: PolyBasis
    coef: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.basis(X) @ self.coef


def fit_regression(X: np.ndarray, values: np.ndarray, degree: int, linear_from: int | None = None) -> Fit:
    """OLS of values on the basis, reducing the degree while the design is rank-deficient."""
    values = np.asarray(values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValueError("non-finite regression target")
    for d in range(degree, -1, -1):
        basis = PolyBasis.fit(X, d, linear_from=linear_from)
        Phi = basis(X)
        if Phi.shape[1] <= Phi.shape[0]:
            coef, rank = _lstsq(Phi, values)
            if rank == Phi.shape[1]:
                return Fit(basis, coef)
        warnings.warn(f"rank-deficient design at degree {d}; reducing degree", RankDeficiencyWarning,
                      stacklevel=2)
    raise RuntimeError("regression failed even with a constant basis")


def conditional_expectation(ens: PathEnsemble, values: np.ndarray, i: int, degree: int = 2,
                            extra: Sequence[np.ndarray] = ()) -> np.ndarray:
    """Regression estimate of E[values | F_{t_i}] for every path."""
    X = state_features(ens, i, extra)
    return fit_regression(X, values, degree).predict(X)


@dataclass
class ControlFit:
    """Z and U as basis expansions fitted on the martingale increment of one step."""

    basis: PolyBasis
    z_coef: np.ndarray
    u_coef: np.ndarray  # (n_marks, n_terms)

    def predict(self, X: np.ndarray):
        Phi = self.basis(X)
        return Phi @ self.z_coef, Phi @ self.u_coef.T


def fit_controls(basis: PolyBasis, X: np.ndarray, dY: np.ndarray, dW: np.ndarray, dM: np.ndarray,
                 dt: float, m: np.ndarray, method: str = "joint") -> ControlFit:
    """Estimate Z_i, U_i from the increment dY = Y_{i+1} - E[Y_{i+1} | F_i].

    ``joint`` solves min |dY - Z dW - sum_k U_k dM_k|^2 over basis expansions of
    Z and U_k; its population solution is E[dY dW | F]/dt and
    E[dY dM_k | F]/(m_k dt) because the increments are conditionally orthogonal.
    ``projection`` regresses dY dW and dY dM_k on the basis and divides by the
    isometry normalizers directly.
    """
    Phi = basis(X)
    n_terms = Phi.shape[1]
    n_marks = dM.shape[1]
    if method == "joint":
        D = np.column_stack([dW[:, None] * Phi] + [dM[:, k:k + 1] * Phi for k in range(n_marks)])
        coef, rank = _lstsq(D, dY)
        if rank < D.shape[1]:
            warnings.warn("rank-deficient control regression", RankDeficiencyWarning, stacklevel=2)
        z = coef[:n_terms]
        u = coef[n_terms:].reshape(n_marks, n_terms)
    elif method == "projection":
        z, _ = _lstsq(Phi, dY * dW)
        z = z / dt
        u = np.zeros((n_marks, n_terms))
        for k in range(n_marks):
            uk, _ = _lstsq(Phi, dY * dM[:, k])
            u[k] = uk / (m[k] * dt)
    else:
        raise ValueError(f"unknown control estimator {method!r}")
    return ControlFit(basis, z, u)


def fit_joint(X: np.ndarray, target: np.ndarray, dW: np.ndarray, dM: np.ndarray, degree: int,
              linear_from: int | None = None):
    """Regress target on [phi, dW phi, dM_k phi] simultaneously.

    The phi part estimates E[target | F_i]; the dW and dM parts are Z and U.
    The increment columns act as a martingale control variate: they have zero
    conditional mean, so they soak up variance without biasing the first part.
    """
    target = np.asarray(target, dtype=float)
    if not np.all(np.isfinite(target)):
        raise ValueError("non-finite regression target")
    n_marks = dM.shape[1]
    for d in range(degree, -1, -1):
        basis = PolyBasis.fit(X, d, linear_from=linear_from)
        Phi = basis(X)
        D = np.column_stack([Phi, dW[:, None] * Phi] + [dM[:, k:k + 1] * Phi for k in range(n_marks)])
        if D.shape[1] <= D.shape[0]:
            coef, rank = _lstsq(D, target)
            if rank == D.shape[1]:
                n = Phi.shape[1]
                return (Fit(basis, coef[:n]),
                        ControlFit(basis, coef[n:2 * n], coef[2 * n:].reshape(n_marks, n)))
        warnings.warn(f"rank-deficient joint design at degree {d}; reducing degree", RankDeficiencyWarning,
                      stacklevel=2)
    raise RuntimeError("joint regression failed even with a constant basis")


def nested_mc_expectation(ens: PathEnsemble, functional: Callable[[PathEnsemble], np.ndarray], i: int,
                          n_inner: int = 2000, paths: Sequence[int] | None = None, tag: int = 0):
    """Brute-force E[H | F_{t_i}]: resimulate the increments after t_i for each path.

    Returns (means, standard errors) over the requested paths.
    """
    if paths is None:
        paths = range(ens.n_paths)
    paths = list(paths)
    if len(paths) > 1000:
        raise ValueError("nested Monte Carlo is an oracle for small ensembles only")
    means = np.empty(len(paths))
    ses = np.empty(len(paths))
    for j, p in enumerate(paths):
        vals = np.asarray(functional(branch_ensemble(ens, p, i, n_inner, tag)), dtype=float)
        means[j] = vals.mean()
        ses[j] = vals.std(ddof=1) / np.sqrt(n_inner)
    return means, ses
