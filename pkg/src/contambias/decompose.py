"""Own-effect / contamination decomposition of multi-treatment regressions.

For the uninteracted regression of Y on arm indicators X and controls W,

    beta_hat = sum_i Lambda_i tau_hat(W_i),
    Lambda_i = (Xdot'Xdot)^{-1} Xdot_i X_i',

where Xdot are the residuals of X on (1, W) and tau_hat(W_i) are the
conditional effects from the fully interacted regression. The diagonal of
Lambda_i gives the own-effect component and the off-diagonal the
contamination component. The identity is exact given the OLS normal
equations.

Stratum-level weights are rescaled so that their mass-weighted average is
the identity: ``lambda(w) = (N / n_w) * sum_{i in w} Lambda_i``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .data import (
    DesignSpec,
    Dataset,
    build_design,
    cell_counts,
    encode_treatments,
)
from .exceptions import (
    BootstrapCellFailure,
    ContaminationBiasError,
    EmptyCell,
    ValidationError,
)
from .regress import DesignMatrix, check_full_rank, hc_variance, ols_fit, residualize, robust_se

logger = logging.getLogger(__name__)


@dataclass(eq=False)
class ConditionalATEs:
    """Per-stratum effect estimates from the interacted regression.

    Arrays are indexed by stratum (``S``) over the full dataset; strata
    lacking an arm are excluded and carry NaN.
    """

    strata: list
    tau: np.ndarray
    se: np.ndarray
    masses: np.ndarray
    cells: np.ndarray
    included: np.ndarray
    stratum_of_obs: np.ndarray
    tau_per_obs: np.ndarray

    @property
    def excluded(self) -> list:
        return [s for s, ok in zip(self.strata, self.included) if not ok]


@dataclass(eq=False)
class WeightDecomposition:
    arm_names: tuple
    beta_hat: np.ndarray
    beta_se: np.ndarray
    own_component: np.ndarray
    contamination_component: np.ndarray
    lambda_per_obs: np.ndarray
    lambda_per_stratum: np.ndarray
    lambda_sums: np.ndarray
    cates: ConditionalATEs
    warnings: list = field(default_factory=list)

    @property
    def strata(self) -> list:
        return self.cates.strata

    @property
    def stratum_masses(self) -> np.ndarray:
        return self.cates.masses

    @property
    def tau_hat_per_stratum(self) -> np.ndarray:
        return self.cates.tau

    @property
    def n(self) -> int:
        return self.lambda_per_obs.shape[0]

    def lambda_map(self) -> dict:
        return dict(zip(self.strata, self.lambda_per_stratum))

    def tau_map(self) -> dict:
        return {s: t for s, t, ok in zip(self.strata, self.cates.tau, self.cates.included) if ok}


@dataclass(eq=False)
class WorstCaseBounds:
    """Extreme contamination attainable by permuting conditional effects.

    ``pairs[(k, l)]`` holds the per-arm ``(lower, upper)`` pieces together
    with the assignments used: ``upper_perm[j]`` is the stratum whose effect
    is placed on the j-th included stratum.
    """

    lower: np.ndarray
    upper: np.ndarray
    observed: np.ndarray
    pairs: dict = field(default_factory=dict)


def _default_spec(dataset: Dataset, spec: Optional[DesignSpec]) -> DesignSpec:
    if spec is None:
        return DesignSpec.default_for(dataset)
    return DesignSpec(spec.control_style)


def lambda_matrices(X, W_design) -> np.ndarray:
    """Per-observation weight matrices, shape ``(N, K, K)``.

    ``W_design`` must include the intercept. The weights sum to the identity.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if not isinstance(W_design, DesignMatrix):
        W_design = DesignMatrix(np.asarray(W_design, dtype=float),
                                [f"w{j}" for j in range(np.shape(W_design)[1])])
    joint = DesignMatrix(
        np.hstack([X, W_design.values]),
        [f"x{k}" for k in range(X.shape[1])] + list(W_design.column_labels),
    )
    check_full_rank(joint)
    Xdot = residualize(X, W_design)
    A = np.linalg.solve(Xdot.T @ Xdot, Xdot.T).T
    return A[:, :, None] * X[:, None, :]


def conditional_ates(dataset: Dataset, spec: Optional[DesignSpec] = None,
                     flavor: str = "HC1") -> ConditionalATEs:
    """Conditional effects ``tau_k(w) = g0_k + w'gW_k`` per stratum.

    Strata are the distinct control rows. With categorical controls, strata
    missing an arm are dropped from the interacted fit and reported. Standard
    errors come from the robust variance of the interacted fit.
    """
    spec = _default_spec(dataset, spec)
    counts, inverse, labels, _ = cell_counts(dataset)
    S, K = len(labels), dataset.n_treatments
    if dataset.all_categorical:
        included = np.all(counts > 0, axis=1)
    else:
        included = np.ones(S, dtype=bool)
    if not included.any():
        empty = [(labels[s], dataset.arm_names[a]) for s, a in zip(*np.nonzero(counts == 0))]
        raise EmptyCell("every stratum is missing at least one arm", empty)
    if included.all():
        sub, rows = dataset, np.arange(dataset.n)
    else:
        rows = np.flatnonzero(included[inverse])
        sub = dataset.subset(rows)
        logger.warning("excluded %d strata with empty arm cells", int((~included).sum()))
    design = build_design(sub, DesignSpec(spec.control_style, "raw"))
    fit = ols_fit(sub.outcome, design)
    V = hc_variance(fit, flavor)
    C = design.block("controls")
    c = C.shape[1]
    t_idx = np.arange(design.blocks["treatments"].start, design.blocks["treatments"].stop)
    i0 = design.blocks["interactions"].start
    gamma0 = fit.coefficients[t_idx]
    gammaW = fit.coefficients[i0:i0 + K * c].reshape(K, c)
    tau_rows = gamma0 + C @ gammaW.T

    tau_obs = np.full((dataset.n, K), np.nan)
    tau_obs[rows] = tau_rows
    tau = np.full((S, K), np.nan)
    se = np.full((S, K), np.nan)
    sub_strata = inverse[rows]
    _, first_sub = np.unique(sub_strata, return_index=True)
    for r in first_sub:
        s = sub_strata[r]
        tau[s] = tau_rows[r]
        for k in range(K):
            g = np.zeros(design.shape[1])
            g[t_idx[k]] = 1.0
            g[i0 + k * c:i0 + (k + 1) * c] = C[r]
            se[s, k] = np.sqrt(max(g @ V @ g, 0.0))
    return ConditionalATEs(
        strata=labels, tau=tau, se=se, masses=counts.sum(axis=1).astype(float),
        cells=counts, included=included, stratum_of_obs=inverse, tau_per_obs=tau_obs,
    )


def decompose_beta(dataset: Dataset, spec: Optional[DesignSpec] = None,
                   flavor: str = "HC1") -> WeightDecomposition:
    """Split each uninteracted coefficient into own and contamination parts."""
    spec = _default_spec(dataset, spec)
    design = build_design(dataset, DesignSpec(spec.control_style, "none"))
    fit = ols_fit(dataset.outcome, design)
    t = design.blocks["treatments"]
    beta = fit.coefficients[t]
    beta_se = robust_se(fit, flavor)[t]

    X = design.block("treatments")
    keep = [0] + list(range(design.blocks["controls"].start, design.blocks["controls"].stop))
    W = DesignMatrix(design.values[:, keep], [design.column_labels[j] for j in keep], True)
    lam = lambda_matrices(X, W)

    cates = conditional_ates(dataset, spec, flavor)
    tau_obs = cates.tau_per_obs
    valid = ~np.isnan(tau_obs[:, 0]) if tau_obs.shape[1] else np.ones(dataset.n, bool)
    K = X.shape[1]
    contrib = np.einsum("ikl,il->ikl", lam[valid], tau_obs[valid]).sum(axis=0)
    own = np.diag(contrib).copy()
    contamination = contrib.sum(axis=1) - own

    S = len(cates.strata)
    sums = np.zeros((S, K, K))
    np.add.at(sums, cates.stratum_of_obs, lam)
    per_stratum = sums * (dataset.n / cates.masses)[:, None, None]

    warnings = []
    if not cates.included.all():
        warnings.append(
            f"strata excluded from conditional effects (empty arm cells): {cates.excluded}; "
            "own + contamination no longer equals the regression coefficient"
        )
    if not dataset.all_categorical:
        neg = int(np.sum(np.diagonal(per_stratum, axis1=1, axis2=2) < 0))
        if neg:
            warnings.append(f"{neg} negative own-treatment stratum weights (non-saturated controls)")
    for w in warnings:
        logger.warning(w)
    return WeightDecomposition(
        arm_names=dataset.arm_names[1:], beta_hat=beta, beta_se=beta_se,
        own_component=own, contamination_component=contamination,
        lambda_per_obs=lam, lambda_per_stratum=per_stratum, lambda_sums=sums,
        cates=cates, warnings=warnings,
    )


def worst_case_bounds(decomp: WeightDecomposition) -> WorstCaseBounds:
    """Contamination bias range under re-orderings of the conditional effects.

    For each own arm k and contaminating arm l, the stratum sums of
    ``Lambda_i[k, l]`` are paired with the conditional effects of arm l in
    the same (upper) or opposite (lower) sort order. Pieces are summed over l.
    """
    inc = decomp.cates.included
    if inc.sum() < 2:
        raise ValidationError("worst-case bounds need at least two strata")
    K = decomp.beta_hat.shape[0]
    idx = np.flatnonzero(inc)
    lower, upper = np.zeros(K), np.zeros(K)
    pairs = {}
    for k in range(K):
        for l in range(K):
            if l == k:
                continue
            s = decomp.lambda_sums[idx, k, l]
            t = decomp.cates.tau[idx, l]
            s_order = np.argsort(s, kind="stable")
            t_order = np.argsort(t, kind="stable")
            up = float(s[s_order] @ t[t_order])
            lo = float(s[s_order] @ t[t_order[::-1]])
            up_perm = np.empty(len(idx), dtype=int)
            lo_perm = np.empty(len(idx), dtype=int)
            up_perm[s_order] = idx[t_order]
            lo_perm[s_order] = idx[t_order[::-1]]
            pairs[(k, l)] = {"lower": lo, "upper": up,
                             "upper_perm": up_perm, "lower_perm": lo_perm}
            lower[k] += lo
            upper[k] += up
    return WorstCaseBounds(lower, upper, decomp.contamination_component.copy(), pairs)


def _weighted_corr(x, y, w):
    w = w / w.sum()
    mx, my = w @ x, w @ y
    vx, vy = w @ (x - mx) ** 2, w @ (y - my) ** 2
    return (w @ ((x - mx) * (y - my))) / np.sqrt(vx * vy)


def _is_constant(x) -> bool:
    return bool(np.allclose(x, x[0], rtol=1e-12, atol=1e-14))


@dataclass(eq=False)
class WeightEffectCorrelation:
    """Mass-weighted correlations across strata.

    ``corr[k, l]`` correlates ``lambda_kl(w)`` with ``tau_l(w)``; NaN where
    undefined, with ``defined[k, l]`` False.
    """

    corr: np.ndarray
    defined: np.ndarray
    scatter: pd.DataFrame


def scatter_table(decomp: WeightDecomposition) -> pd.DataFrame:
    """One row per stratum: mass, all weights, effects and their SEs.

    Columns ``lambda_k_l``, ``tau_k`` and ``se_k`` use 1-based arm indices.
    """
    K = decomp.beta_hat.shape[0]
    c = decomp.cates
    data = {"stratum": c.strata, "mass": c.masses.astype(int), "included": c.included}
    for k in range(K):
        for l in range(K):
            data[f"lambda_{k + 1}_{l + 1}"] = decomp.lambda_per_stratum[:, k, l]
    for k in range(K):
        data[f"tau_{k + 1}"] = c.tau[:, k]
        data[f"se_{k + 1}"] = c.se[:, k]
    return pd.DataFrame(data)


def weight_effect_correlation(decomp: WeightDecomposition) -> WeightEffectCorrelation:
    inc = decomp.cates.included
    if inc.sum() < 2:
        raise ValidationError("correlations need at least two strata")
    K = decomp.beta_hat.shape[0]
    w = decomp.cates.masses[inc]
    corr = np.full((K, K), np.nan)
    defined = np.zeros((K, K), dtype=bool)
    for k in range(K):
        for l in range(K):
            x = decomp.lambda_per_stratum[inc, k, l]
            y = decomp.cates.tau[inc, l]
            if _is_constant(x) or _is_constant(y):
                continue
            corr[k, l] = _weighted_corr(x, y, w)
            defined[k, l] = True
    return WeightEffectCorrelation(corr, defined, scatter_table(decomp))


@dataclass(eq=False)
class HeterogeneitySD:
    sd: np.ndarray
    raw_sd: np.ndarray
    mean_sq_se: np.ndarray
    clamped: np.ndarray


def heterogeneity_sd(cates: ConditionalATEs) -> HeterogeneitySD:
    """Across-stratum SD of conditional effects net of estimation noise.

    Subtracts the mass-weighted mean squared SE from the mass-weighted
    variance; negative differences are clamped to zero and flagged.
    """
    inc = cates.included
    w = cates.masses[inc] / cates.masses[inc].sum()
    tau, se = cates.tau[inc], cates.se[inc]
    mean = w @ tau
    var = w @ (tau - mean) ** 2
    msq = w @ se ** 2
    diff = var - msq
    return HeterogeneitySD(np.sqrt(np.maximum(diff, 0.0)), np.sqrt(var), msq, diff < 0)


# -- bootstrap -------------------------------------------------------------

@dataclass(eq=False)
class BootstrapResult:
    """Bootstrap standard errors of the decomposition.

    ``se`` maps ``beta``, ``own``, ``contamination``, ``bound_lower`` and
    ``bound_upper`` to K-vectors.
    """

    se: dict
    replicates: dict
    B: int
    seed: int
    scheme: str
    n_redrawn: int
    method: str = "bootstrap"


def _resample(rng, n, cells_index, scheme):
    if scheme == "iid":
        return rng.integers(0, n, n)
    out = np.empty(n, dtype=int)
    pos = 0
    for members in cells_index:
        m = members.shape[0]
        out[pos:pos + m] = members[rng.integers(0, m, m)]
        pos += m
    return out


def _replicate_stats(ds: Dataset, spec, allowed_excluded: set):
    d = decompose_beta(ds, spec)
    bad = set(d.cates.excluded) - allowed_excluded
    if bad:
        raise EmptyCell(f"replicate has empty cells in strata {sorted(bad)}")
    if d.cates.included.sum() >= 2:
        b = worst_case_bounds(d)
        lo, up = b.lower, b.upper
    else:
        lo = up = np.full(d.beta_hat.shape, np.nan)
    return np.vstack([d.beta_hat, d.own_component, d.contamination_component, lo, up])


def decomposition_se(dataset: Dataset, spec: Optional[DesignSpec] = None, *,
                     B: int = 500, seed: int = 0, scheme: str = "iid",
                     n_jobs: int = 1) -> BootstrapResult:
    """Nonparametric bootstrap SEs for the decomposition.

    ``scheme='iid'`` resamples rows; ``scheme='cells'`` resamples within
    stratum x arm cells, holding the design fixed. Replicate ``b`` draws from
    ``default_rng([seed, b, attempt])``, so output does not depend on
    ``n_jobs``. Replicates with new empty cells are redrawn; more than
    ``10 * B`` draws in total raises ``BootstrapCellFailure``.
    """
    if B < 2:
        raise ValidationError("B must be at least 2")
    if scheme not in ("iid", "cells"):
        raise ValidationError("scheme must be 'iid' or 'cells'")
    spec = _default_spec(dataset, spec)
    base = decompose_beta(dataset, spec)
    allowed = set(base.cates.excluded)
    counts, inverse, _, _ = cell_counts(dataset)
    key = inverse * len(dataset.arm_names) + dataset.treatment
    cells_index = [np.flatnonzero(key == u) for u in np.unique(key)]
    cap = 10 * B

    def one(b):
        for attempt in range(cap):
            rng = np.random.default_rng([seed, b, attempt])
            rows = _resample(rng, dataset.n, cells_index, scheme)
            try:
                return _replicate_stats(dataset.subset(rows), spec, allowed), attempt
            except ContaminationBiasError:
                continue
        return None, cap

    if n_jobs == 1:
        results = [one(b) for b in range(B)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(one, range(B)))
    redrawn = sum(a for _, a in results)
    if redrawn + B > cap or any(r is None for r, _ in results):
        raise BootstrapCellFailure(
            f"{redrawn} redraws for {B} replicates exceeds the cap of {cap} draws"
        )
    stack = np.stack([r for r, _ in results])
    names = ["beta", "own", "contamination", "bound_lower", "bound_upper"]
    reps = {n: stack[:, i, :] for i, n in enumerate(names)}
    se = {n: np.std(v, axis=0, ddof=1) for n, v in reps.items()}
    return BootstrapResult(se, reps, B, seed, scheme, redrawn)
