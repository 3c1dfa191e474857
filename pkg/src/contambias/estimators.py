"""Contamination-free estimators and their standard errors.

* ``ate_interacted``: regression with arm x demeaned-control interactions,
  estimating unweighted average effects.
* ``one_at_a_time``: the uninteracted regression run separately on each
  ``{control, arm k}`` subsample.
* ``common_weights``: weighted regression of Y on the arm indicators with
  observation weight ``lc(W) / p_D(W)``, ``lc = 1 / sum_k 1/p_k``.

Propensity scores are fitted values of the linear projection of each arm
indicator on the controls, which equal within-stratum arm shares under
strata dummies.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .data import DesignSpec, Dataset, build_design, cell_counts, control_block
from .decompose import conditional_ates
from .exceptions import EmptyCell, NonPositivePropensity, ValidationError
from .regress import DesignMatrix, ols_fit, residualize, robust_se, wls_fit

logger = logging.getLogger(__name__)

KINDS = ("Uninteracted", "ATE_interacted", "OneAtATime", "CommonWeights")

# p_hat at or below this counts as zero; projections leave ~1e-16 noise
PSCORE_FLOOR = 1e-10


@dataclass(eq=False)
class EstimateSet:
    kind: str
    arm_names: tuple
    beta: np.ndarray
    se_robust: np.ndarray
    se_known_pscore: Optional[np.ndarray] = None
    se_estimated_pscore: Optional[np.ndarray] = None
    n_used: int = 0
    weights_summary: Optional[dict] = None
    warnings: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else [float(v) for v in np.asarray(a)]

        def plain(v):
            if isinstance(v, dict):
                return {str(k): plain(x) for k, x in v.items()}
            if isinstance(v, (list, tuple, np.ndarray)):
                return [plain(x) for x in v]
            return v.item() if isinstance(v, np.generic) else v

        out = plain(asdict(self))
        for key in ("beta", "se_robust", "se_known_pscore", "se_estimated_pscore"):
            out[key] = arr(getattr(self, key))
        return out


@dataclass(eq=False)
class PropensityFit:
    """Fitted arm probabilities, ``p_hat[:, k]`` for arms ``0..K``.

    Rows sum to one; entries may fall outside [0, 1] with continuous
    controls, counted in ``n_out_of_range``.
    """

    p_hat: np.ndarray
    method: str = "linear_projection"

    @property
    def n_out_of_range(self) -> int:
        return int(np.sum(np.any((self.p_hat < 0) | (self.p_hat > 1), axis=1)))


def _spec(dataset, spec, **kw):
    style = spec.control_style if spec is not None else DesignSpec.default_for(dataset).control_style
    return DesignSpec(style, **kw)


def _control_design(dataset: Dataset, spec: DesignSpec) -> DesignMatrix:
    C, labels = control_block(dataset)
    return DesignMatrix(np.hstack([np.ones((dataset.n, 1)), C]), ["const"] + labels, True)


def _require_full_cells(dataset: Dataset, arms=None):
    if not dataset.all_categorical or not dataset.control_names:
        return
    counts, _, labels, _ = cell_counts(dataset)
    arms = range(counts.shape[1]) if arms is None else arms
    empty = [(labels[s], dataset.arm_names[a]) for s in range(len(labels))
             for a in arms if counts[s, a] == 0]
    if empty:
        raise EmptyCell(f"empty stratum x arm cells: {empty}", empty)


def uninteracted(dataset: Dataset, spec: Optional[DesignSpec] = None,
                 flavor: str = "HC1") -> EstimateSet:
    """The plain regression of Y on arm indicators and controls."""
    design = build_design(dataset, _spec(dataset, spec))
    fit = ols_fit(dataset.outcome, design)
    t = design.blocks["treatments"]
    return EstimateSet("Uninteracted", dataset.arm_names[1:], fit.coefficients[t],
                       robust_se(fit, flavor)[t], n_used=dataset.n)


def ate_interacted(dataset: Dataset, spec: Optional[DesignSpec] = None,
                   flavor: str = "HC1") -> EstimateSet:
    """Unweighted average effects from the demeaned interacted regression.

    Robust SEs are read off the demeaned design directly, treating the
    control means as fixed.
    """
    _require_full_cells(dataset)
    design = build_design(dataset, _spec(dataset, spec, interaction="demeaned"))
    fit = ols_fit(dataset.outcome, design)
    t = design.blocks["treatments"]
    est = EstimateSet("ATE_interacted", dataset.arm_names[1:], fit.coefficients[t],
                      robust_se(fit, flavor)[t], n_used=dataset.n)
    p = estimate_propensity(dataset, spec)
    if np.all(p.p_hat > PSCORE_FLOOR):
        est.se_known_pscore = known_pscore_variance(dataset, p, "ATE_interacted")
    else:
        est.warnings.append("known-propensity SE skipped: non-positive propensities")
    return est


def ate_from_raw_interaction(dataset: Dataset, spec: Optional[DesignSpec] = None) -> np.ndarray:
    """``g0_k + Wbar' gW_k`` from the undemeaned interacted regression."""
    design = build_design(dataset, _spec(dataset, spec, interaction="raw"))
    fit = ols_fit(dataset.outcome, design)
    K = design.blocks["treatments"].stop - design.blocks["treatments"].start
    c = design.blocks["controls"].stop - design.blocks["controls"].start
    g0 = fit.coefficients[design.blocks["treatments"]]
    gW = fit.coefficients[design.blocks["interactions"]].reshape(K, c)
    return g0 + gW @ design.control_means


def one_at_a_time(dataset: Dataset, spec: Optional[DesignSpec] = None,
                  flavor: str = "HC1") -> EstimateSet:
    """Arm-by-arm regressions on the ``{0, k}`` subsamples.

    Strata without both arms in a subsample get zero weight; they are listed
    in the warnings.
    """
    K = dataset.n_treatments
    beta, se, warnings, n_k = np.zeros(K), np.zeros(K), [], []
    counts, _, labels, _ = cell_counts(dataset)
    for k in range(1, K + 1):
        design = build_design(dataset, _spec(dataset, spec, subsample=(0, k)))
        fit = ols_fit(dataset.outcome[design.rows], design)
        j = design.index(f"arm={dataset.arm_names[k]}")
        beta[k - 1] = fit.coefficients[j]
        se[k - 1] = robust_se(fit, flavor)[j]
        n_k.append(int(design.rows.shape[0]))
        if dataset.all_categorical and dataset.control_names:
            thin = [labels[s] for s in range(len(labels))
                    if (counts[s, 0] == 0) != (counts[s, k] == 0)]
            if thin:
                warnings.append(
                    f"arm {dataset.arm_names[k]}: strata with only one of (control, arm): {thin}"
                )
    est = EstimateSet("OneAtATime", dataset.arm_names[1:], beta, se, n_used=dataset.n,
                      warnings=warnings, extra={"n_per_arm": n_k})
    p = estimate_propensity(dataset, spec)
    if np.all(p.p_hat > PSCORE_FLOOR):
        est.se_known_pscore = known_pscore_variance(dataset, p, "OneAtATime")
    else:
        est.warnings.append("known-propensity SE skipped: non-positive propensities")
    return est


def estimate_propensity(dataset: Dataset, spec: Optional[DesignSpec] = None) -> PropensityFit:
    """Linear-projection propensity scores ``p_k = X_k - Xdot_k``."""
    W = _control_design(dataset, _spec(dataset, spec))
    X = np.zeros((dataset.n, len(dataset.arm_names)))
    X[np.arange(dataset.n), dataset.treatment] = 1.0
    p = X[:, 1:] - residualize(X[:, 1:], W)
    p0 = 1.0 - p.sum(axis=1, keepdims=True)
    return PropensityFit(np.hstack([p0, p]))


def common_weight_values(p_hat: np.ndarray) -> np.ndarray:
    return 1.0 / np.sum(1.0 / p_hat, axis=1)


def common_weights_explicit(outcome, treatment, p_hat) -> np.ndarray:
    """Weighted mean of arm k minus weighted mean of arm 0, per arm."""
    y = np.asarray(outcome, float)
    d = np.asarray(treatment)
    lc = common_weight_values(p_hat)

    def wmean(k):
        m = d == k
        w = lc[m] / p_hat[m, k]
        return np.sum(w * y[m]) / np.sum(w)

    base = wmean(0)
    return np.array([wmean(k) - base for k in range(1, p_hat.shape[1])])


def common_weights(dataset: Dataset, spec: Optional[DesignSpec] = None,
                   flavor: str = "HC1") -> EstimateSet:
    """Common-weight efficiently weighted effects.

    Rows with any non-positive fitted propensity are dropped (the estimand
    changes; a warning is recorded).
    """
    pf = estimate_propensity(dataset, spec)
    p = pf.p_hat
    ok = np.all(p > PSCORE_FLOOR, axis=1)
    warnings = []
    if not ok.all():
        n_bad = int((~ok).sum())
        warnings.append(f"excluded {n_bad} rows with non-positive propensity scores; "
                        "the estimand is redefined on the remaining rows")
        logger.warning(warnings[-1])
        if not ok.any():
            raise NonPositivePropensity("all rows have a non-positive propensity score")
    rows = np.flatnonzero(ok)
    d, y, p = dataset.treatment[rows], dataset.outcome[rows], p[rows]
    present = np.bincount(d, minlength=p.shape[1])
    if np.any(present == 0):
        raise EmptyCell("an arm has no rows after excluding non-positive propensities")
    lc = common_weight_values(p)
    omega = lc / p[np.arange(rows.shape[0]), d]
    K = dataset.n_treatments
    X = np.zeros((rows.shape[0], K))
    treated = d > 0
    X[np.flatnonzero(treated), d[treated] - 1] = 1.0
    design = DesignMatrix(np.hstack([np.ones((rows.shape[0], 1)), X]),
                          ["const"] + [f"arm={a}" for a in dataset.arm_names[1:]], True)
    fit = wls_fit(y, design, omega)
    est = EstimateSet(
        "CommonWeights", dataset.arm_names[1:], fit.coefficients[1:],
        robust_se(fit, flavor)[1:], n_used=int(rows.shape[0]),
        weights_summary={"min": float(omega.min()), "mean": float(omega.mean()),
                         "max": float(omega.max())},
        warnings=warnings, extra={"n_excluded": int((~ok).sum())},
    )
    sub = dataset if ok.all() else dataset.subset(rows)
    sub_p = PropensityFit(p)
    est.se_known_pscore = known_pscore_variance(sub, sub_p, "CommonWeights")
    try:
        est.se_estimated_pscore = known_pscore_variance(
            sub, sub_p, "CommonWeights", estimated=True, beta=est.beta)
    except EmptyCell as exc:
        est.warnings.append(f"estimated-propensity SE skipped: {exc}")
    return est


def _cell_moments(dataset: Dataset):
    """Per-row within-cell mean and variance for every arm.

    Returns ``(mean, var)`` of shape ``(N, K+1)``; ``mean`` is NaN where the
    row's stratum has no observation in that arm. Cells with fewer than two
    observations use the arm-pooled within-cell variance.
    """
    counts, inverse, _, _ = cell_counts(dataset)
    S, A = counts.shape
    sums = np.zeros((S, A))
    np.add.at(sums, (inverse, dataset.treatment), dataset.outcome)
    with np.errstate(invalid="ignore", divide="ignore"):
        means = sums / counts
    dev = dataset.outcome - means[inverse, dataset.treatment]
    ss = np.zeros((S, A))
    np.add.at(ss, (inverse, dataset.treatment), dev ** 2)
    with np.errstate(invalid="ignore", divide="ignore"):
        var = ss / counts
    big = counts >= 2
    for a in range(A):
        n_big = counts[big[:, a], a].sum()
        if n_big:
            pooled = ss[big[:, a], a].sum() / n_big
        else:
            pooled = np.var(dataset.outcome[dataset.treatment == a])
        var[~big[:, a], a] = pooled
    return means[inverse], var[inverse]


def known_pscore_variance(dataset: Dataset, p, kind: str, *, estimated: bool = False,
                          beta=None) -> np.ndarray:
    """Plug-in standard errors under known propensity scores.

    For weights ``l(W)`` implied by ``kind`` the variance of arm k is

        mean(l^2 (s0^2/p0 + sk^2/pk)) / mean(l)^2 / N

    with within-cell variances ``s^2``. With ``estimated=True`` (common
    weights only) the propensity-estimation term

        mean(l^2 (tau_k - beta_k)^2 (sum_j l^2/p_j^3 - 1)) / mean(l)^2

    is added inside the bracket.

    ``p`` is a :class:`PropensityFit` or an ``N x (K+1)`` array.
    """
    P = p.p_hat if isinstance(p, PropensityFit) else np.asarray(p, dtype=float)
    if P.shape != (dataset.n, len(dataset.arm_names)):
        raise ValidationError("propensity matrix must be N x (K+1)")
    if np.any(P <= 0) or np.any(P >= 1):
        raise NonPositivePropensity("propensity scores must lie strictly inside (0, 1)")
    means, var = _cell_moments(dataset)
    K = dataset.n_treatments
    N = dataset.n
    out = np.zeros(K)
    if kind == "ATE_interacted":
        lam = np.ones((N, K))
    elif kind == "OneAtATime":
        lam = P[:, [0]] * P[:, 1:] / (P[:, [0]] + P[:, 1:])
    elif kind == "CommonWeights":
        lam = np.repeat(common_weight_values(P)[:, None], K, axis=1)
    else:
        raise ValidationError(f"no known-propensity variance for kind {kind!r}")
    if estimated and kind != "CommonWeights":
        raise ValidationError("the estimated-propensity term is defined for CommonWeights only")
    if estimated:
        tau = means[:, 1:] - means[:, [0]]
        if np.any(np.isnan(tau)):
            if dataset.all_categorical:
                raise EmptyCell("within-cell effects undefined for strata missing an arm")
            tau = conditional_ates(dataset).tau_per_obs
            if np.any(np.isnan(tau)):
                raise EmptyCell("conditional effects unavailable for some rows")
        lc = lam[:, 0]
        penalty = np.sum(lc[:, None] ** 2 / P ** 3, axis=1) - 1.0
    for k in range(K):
        l = lam[:, k]
        core = l ** 2 * (var[:, 0] / P[:, 0] + var[:, k + 1] / P[:, k + 1])
        if estimated:
            b = np.sum(l * tau[:, k]) / np.sum(l) if beta is None else beta[k]
            core = core + l ** 2 * (tau[:, k] - b) ** 2 * penalty
        out[k] = np.mean(core) / np.mean(l) ** 2
    return np.sqrt(out / N)


ESTIMATORS = {
    "Uninteracted": uninteracted,
    "ATE_interacted": ate_interacted,
    "OneAtATime": one_at_a_time,
    "CommonWeights": common_weights,
}
