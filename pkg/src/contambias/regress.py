"""Least-squares engine.

QR-based (weighted) least squares, Frisch-Waugh-Lovell residualization and
heteroskedasticity-robust sandwich variances. Nothing here forms ``X'X`` and
inverts it; the Gram inverse is built from the triangular factor and only
used for the sandwich formula.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla

from .exceptions import NonFinite, NonPositiveWeight, RankDeficient

RANK_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Regressor matrix with labelled columns.

    ``blocks`` maps block names (``intercept``, ``treatments``, ``controls``,
    ``interactions``) to column slices; ``rows`` holds the indices of the
    source dataset rows used, when the design was built on a subsample.
    """

    values: np.ndarray
    column_labels: list
    has_intercept: bool = False
    blocks: dict = field(default_factory=dict)
    rows: Optional[np.ndarray] = None
    control_means: Optional[np.ndarray] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        object.__setattr__(self, "values", values)
        labels = list(self.column_labels)
        object.__setattr__(self, "column_labels", labels)
        if len(labels) != values.shape[1]:
            raise ValueError(
                f"{len(labels)} labels for {values.shape[1]} columns"
            )
        if len(set(labels)) != len(labels):
            raise ValueError("column labels must be unique")
        if not np.all(np.isfinite(values)):
            raise NonFinite("design matrix contains NaN or Inf")
        if values.shape[0] < values.shape[1]:
            raise RankDeficient(
                f"{values.shape[0]} rows for {values.shape[1]} columns",
                labels,
            )

    @property
    def shape(self):
        return self.values.shape

    def block(self, name: str) -> np.ndarray:
        return self.values[:, self.blocks[name]]

    def index(self, label: str) -> int:
        return self.column_labels.index(label)


@dataclass(frozen=True, eq=False)
class RegressionFit:
    coefficients: np.ndarray
    residuals: np.ndarray
    gram_inverse: np.ndarray
    fitted: np.ndarray
    design: DesignMatrix
    weights: Optional[np.ndarray] = None

    @property
    def n_obs(self) -> int:
        return self.design.shape[0]

    @property
    def n_params(self) -> int:
        return self.design.shape[1]

    def coef(self, label: str) -> float:
        return float(self.coefficients[self.design.index(label)])

    def vcov(self, flavor: str = "HC1") -> np.ndarray:
        return hc_variance(self, flavor)


def as_design(X, labels=None) -> DesignMatrix:
    if isinstance(X, DesignMatrix):
        return X
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if labels is None:
        labels = [f"x{j}" for j in range(X.shape[1])]
    return DesignMatrix(X, labels)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFinite("input contains NaN or Inf")


def _pivoted_qr(A: np.ndarray, labels):
    """Economic pivoted QR with a relative singular-value rank check."""
    Q, R, piv = sla.qr(A, mode="economic", pivoting=True)
    sv = sla.svdvals(R)
    if sv.size and (sv[0] == 0 or sv[-1] <= RANK_TOL * sv[0]):
        rank = int(np.sum(sv > RANK_TOL * sv[0])) if sv[0] > 0 else 0
        bad = [labels[j] for j in piv[rank:]]
        raise RankDeficient(
            f"design has rank {rank} < {A.shape[1]} columns; "
            f"collinear columns: {', '.join(map(str, bad))}",
            bad,
        )
    return Q, R, piv


def check_full_rank(X) -> None:
    """Raise ``RankDeficient`` unless ``X`` has full column rank."""
    X = as_design(X)
    _pivoted_qr(X.values, X.column_labels)


def _solve(y: np.ndarray, A: np.ndarray, labels):
    Q, R, piv = _pivoted_qr(A, labels)
    p = A.shape[1]
    beta = np.empty(p)
    beta[piv] = sla.solve_triangular(R, Q.T @ y)
    r_inv = sla.solve_triangular(R, np.eye(p))
    gram_inv = np.empty((p, p))
    gram_inv[np.ix_(piv, piv)] = r_inv @ r_inv.T
    return beta, gram_inv


def ols_fit(Y, X) -> RegressionFit:
    """Ordinary least squares of ``Y`` on the columns of ``X``."""
    X = as_design(X)
    y = np.asarray(Y, dtype=float).ravel()
    if y.shape[0] != X.shape[0]:
        raise ValueError(f"Y has {y.shape[0]} rows, X has {X.shape[0]}")
    _check_finite(y)
    beta, gram_inv = _solve(y, X.values, X.column_labels)
    fitted = X.values @ beta
    return RegressionFit(beta, y - fitted, gram_inv, fitted, X)


def wls_fit(Y, X, weights) -> RegressionFit:
    """Weighted least squares minimizing ``sum(w * (Y - X b)**2)``."""
    X = as_design(X)
    y = np.asarray(Y, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    if not (y.shape[0] == X.shape[0] == w.shape[0]):
        raise ValueError("Y, X and weights must have the same number of rows")
    _check_finite(y, w)
    if np.any(w <= 0):
        raise NonPositiveWeight(f"{int(np.sum(w <= 0))} non-positive weights")
    sw = np.sqrt(w)
    beta, gram_inv = _solve(sw * y, sw[:, None] * X.values, X.column_labels)
    fitted = X.values @ beta
    return RegressionFit(beta, y - fitted, gram_inv, fitted, X, w)


def residualize(targets, controls) -> np.ndarray:
    """Residuals of each target column after projecting on ``controls``.

    Returns an array of the same shape as ``targets``.
    """
    controls = as_design(controls)
    T = np.asarray(targets, dtype=float)
    squeeze = T.ndim == 1
    if squeeze:
        T = T[:, None]
    _check_finite(T)
    if T.shape[0] != controls.shape[0]:
        raise ValueError("targets and controls differ in row count")
    if controls.shape[1] == 0:
        out = T.copy()
    else:
        Q, _, _ = _pivoted_qr(controls.values, controls.column_labels)
        out = T - Q @ (Q.T @ T)
    return out[:, 0] if squeeze else out


def hc_variance(fit: RegressionFit, flavor: str = "HC1") -> np.ndarray:
    """Heteroskedasticity-robust sandwich variance of the coefficients.

    HC0 is ``G X'W diag(e^2) W X G`` with ``G = (X'WX)^-1``; HC1 rescales
    it by ``N / (N - P)``.
    """
    flavor = flavor.upper()
    if flavor not in ("HC0", "HC1"):
        raise ValueError(f"unknown flavor {flavor!r}; use 'HC0' or 'HC1'")
    X = fit.design.values
    score = fit.residuals if fit.weights is None else fit.weights * fit.residuals
    meat_root = X * score[:, None]
    meat = meat_root.T @ meat_root
    V = fit.gram_inverse @ meat @ fit.gram_inverse
    V = 0.5 * (V + V.T)
    if flavor == "HC1":
        n, p = X.shape
        # n == p forces zero residuals, so V is already zero
        if n > p:
            V = V * (n / (n - p))
    return V


def robust_se(fit: RegressionFit, flavor: str = "HC1") -> np.ndarray:
    return np.sqrt(np.clip(np.diag(hc_variance(fit, flavor)), 0.0, None))
