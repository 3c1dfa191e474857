"""Estimator-style wrappers around the functional core.

Every estimator takes the control matrix as ``X`` and the outcome as ``y``;
arm labels are passed to ``fit`` as ``treatment``. Controls are treated as
categorical unless ``control_kinds`` says otherwise.

>>> est = CommonWeightsRegression().fit(W, y, treatment=d)   # doctest: +SKIP
>>> est.coef_, est.se_known_pscore_                          # doctest: +SKIP
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_consistent_length, check_is_fitted

from . import decompose as _dec
from . import estimators as _est
from .data import Dataset, DesignSpec, build_design
from .regress import ols_fit, residualize


def _as_controls(X) -> np.ndarray:
    if X is None:
        return None
    return check_array(X, dtype=None, ensure_2d=True, ensure_all_finite="allow-nan",
                       ensure_min_features=0)


def _to_dataset(X, y, treatment, control_kinds=None, control_arm=None,
                control_names=None) -> Dataset:
    if treatment is None:
        raise ValueError("fit requires treatment=<arm labels>")
    y = check_array(y, ensure_2d=False, dtype=float)
    treatment = np.asarray(treatment).ravel()
    C = _as_controls(X)
    check_consistent_length(y, treatment, C)
    return Dataset.from_arrays(
        y, treatment, C,
        control_names=control_names,
        control_kinds=control_kinds,
        control_arm=control_arm,
    )


class _DatasetEstimator(BaseEstimator):
    """Shared parameter handling; subclasses implement ``_fit_dataset``."""

    def __init__(self, control_kinds: Optional[Sequence[str]] = None, control_arm=None,
                 control_style: Optional[str] = None):
        self.control_kinds = control_kinds
        self.control_arm = control_arm
        self.control_style = control_style

    def _design_spec(self, ds: Dataset) -> DesignSpec:
        if self.control_style is None:
            return DesignSpec.default_for(ds)
        return DesignSpec(control_style=self.control_style)

    def fit(self, X, y, treatment=None):
        ds = _to_dataset(X, y, treatment, self.control_kinds, self.control_arm)
        self.arm_names_ = ds.arm_names
        self.n_features_in_ = ds.controls.shape[1]
        self._fit_dataset(ds, self._design_spec(ds))
        return self

    def _fit_dataset(self, ds, spec):  # pragma: no cover
        raise NotImplementedError


class _EstimateSetMixin:
    def _store(self, res: _est.EstimateSet):
        self.result_ = res
        self.coef_ = res.beta
        self.se_robust_ = res.se_robust
        self.se_known_pscore_ = res.se_known_pscore
        self.n_used_ = res.n_used
        return self


class UninteractedRegression(_EstimateSetMixin, _DatasetEstimator):
    """Partially linear regression of ``y`` on arm indicators and controls."""

    def _fit_dataset(self, ds, spec):
        self._store(_est.uninteracted(ds, spec))


class OneAtATimeRegression(_EstimateSetMixin, _DatasetEstimator):
    """Separate control-versus-arm-k regressions."""

    def _fit_dataset(self, ds, spec):
        self._store(_est.one_at_a_time(ds, spec))


class CommonWeightsRegression(_EstimateSetMixin, _DatasetEstimator):
    """Propensity-weighted contrast using the common weights ``1/sum_k 1/p_k``."""

    def _fit_dataset(self, ds, spec):
        res = _est.common_weights(ds, spec)
        self._store(res)
        self.se_estimated_pscore_ = res.se_estimated_pscore


class InteractedATE(_EstimateSetMixin, _DatasetEstimator):
    """Fully interacted regression; ``coef_`` are the unweighted ATEs.

    ``predict`` returns the fitted conditional effects ``tau(W)`` for each
    row of ``X``, shape ``(n, K)``.
    """

    def _fit_dataset(self, ds, spec):
        self._store(_est.ate_interacted(ds, spec))
        raw = build_design(ds, replace(spec, interaction="raw"))
        fit = ols_fit(ds.outcome, raw)
        K = ds.n_treatments
        self._gamma0 = fit.coefficients[raw.blocks["treatments"]]
        self._gammaW = fit.coefficients[raw.blocks["interactions"]].reshape(K, -1)
        self._control_labels = raw.column_labels[raw.blocks["controls"]]
        self._control_names = ds.control_names

    def predict(self, X):
        check_is_fitted(self, "coef_")
        C = _as_controls(X)
        if C.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {C.shape[1]} columns, expected {self.n_features_in_}")
        col = {name: j for j, name in enumerate(self._control_names)}
        W = np.empty((C.shape[0], len(self._control_labels)))
        for m, label in enumerate(self._control_labels):
            name, _, level = label.partition("=")
            if level:
                W[:, m] = [str(v) == level for v in C[:, col[name]]]
            else:
                W[:, m] = C[:, col[name]].astype(float)
        return self._gamma0[None, :] + W @ self._gammaW.T


class ContaminationDecomposer(_DatasetEstimator):
    """Splits each uninteracted coefficient into own-effect and contamination parts."""

    def _fit_dataset(self, ds, spec):
        d = _dec.decompose_beta(ds, spec)
        self.decomposition_ = d
        self.coef_ = d.beta_hat
        self.own_ = d.own_component
        self.contamination_ = d.contamination_component
        self.lambda_ = d.lambda_per_stratum
        if len(d.cates.strata) - len(d.cates.excluded) >= 2:
            self.bounds_ = _dec.worst_case_bounds(d)
        else:
            self.bounds_ = None


class PropensityProjection(TransformerMixin, BaseEstimator):
    """Linear-projection propensity scores; ``transform`` returns ``(n, K+1)``."""

    def __init__(self, control_kinds: Optional[Sequence[str]] = None, control_arm=None):
        self.control_kinds = control_kinds
        self.control_arm = control_arm

    def fit(self, X, y=None, treatment=None):
        if treatment is None:
            treatment, y = y, None
        treatment = np.asarray(treatment).ravel()
        ds = _to_dataset(X, np.zeros(treatment.shape[0]), treatment,
                         self.control_kinds, self.control_arm)
        self.n_features_in_ = ds.controls.shape[1]
        self.arm_names_ = ds.arm_names
        self.fit_ = _est.estimate_propensity(ds)
        self._dataset = ds
        return self

    def transform(self, X=None):
        check_is_fitted(self, "fit_")
        if X is not None and _as_controls(X).shape[0] != self._dataset.n:
            raise ValueError("transform only supports the rows seen in fit")
        return self.fit_.p_hat

    def fit_transform(self, X, y=None, treatment=None):
        return self.fit(X, y, treatment=treatment).transform(X)


class FWLResidualizer(TransformerMixin, BaseEstimator):
    """Residualizes targets on ``[1, X]`` learned in ``fit``.

    ``transform(T)`` expects targets aligned with the fitted rows.
    """

    def __init__(self, add_intercept: bool = True):
        self.add_intercept = add_intercept

    def fit(self, X, y=None):
        X = check_array(X, dtype=float, ensure_min_features=0)
        if self.add_intercept:
            X = np.column_stack([np.ones(X.shape[0]), X])
        self.controls_ = X
        self.n_features_in_ = X.shape[1] - int(self.add_intercept)
        return self

    def transform(self, T):
        check_is_fitted(self, "controls_")
        T = check_array(T, dtype=float, ensure_2d=False)
        check_consistent_length(T, self.controls_)
        return residualize(T, self.controls_)
