"""Closed-form population calculator and simulator for discrete designs.

A :class:`PopulationSpec` lists strata with mass ``pi(w)``, arm
probabilities ``p(w)`` (arms ``0..K``), mean potential outcomes ``mu(w)``
and outcome variances ``sigma2(w)``. With stratum dummies as controls the
propensity score is spanned by the controls, so the population weight
matrices are

    Lambda(w) = (sum_w pi(w) v(w))^{-1} v(w),   v(w) = diag(p) - p p',

with ``p`` the treated-arm block of ``p(w)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from math import lcm
from typing import Optional, Sequence

import jsonschema
import numpy as np

from .data import CATEGORICAL, Dataset
from .exceptions import (
    NonIntegralCells,
    SingularAverageVariance,
    SpecValidationError,
    ValidationError,
    ZeroMeanWeights,
    ZeroPropensity,
    ZeroVariance,
)

SPEC_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "type": "object",
    "required": ["strata"],
    "properties": {
        "strata": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["mass", "p", "mu"],
                "properties": {
                    "mass": {"type": "number", "minimum": 0},
                    "p": {"type": "array", "minItems": 2,
                          "items": {"type": "number", "minimum": 0, "maximum": 1}},
                    "mu": {"type": "array", "minItems": 2, "items": {"type": "number"}},
                    "sigma2": {"type": "array", "minItems": 2,
                               "items": {"type": "number", "minimum": 0}},
                    "label": {"type": "string"},
                },
            },
        },
        "description": {"type": "string"},
    },
}

_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class PopulationSpec:
    """Discrete population. Arrays have one row per stratum."""

    mass: np.ndarray
    p: np.ndarray
    mu: np.ndarray
    sigma2: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        mass = np.asarray(self.mass, float).ravel()
        p = np.atleast_2d(np.asarray(self.p, float))
        mu = np.atleast_2d(np.asarray(self.mu, float))
        sigma2 = (np.zeros_like(p) if self.sigma2 is None
                  else np.atleast_2d(np.asarray(self.sigma2, float)))
        for name, v in (("mass", mass), ("p", p), ("mu", mu), ("sigma2", sigma2)):
            object.__setattr__(self, name, v)
        S = mass.shape[0]
        if S == 0:
            raise SpecValidationError("at least one stratum is required", "/strata")
        for name, v in (("p", p), ("mu", mu), ("sigma2", sigma2)):
            if v.shape[0] != S:
                raise SpecValidationError(f"{name} has {v.shape[0]} rows for {S} strata", "/strata")
            if v.shape[1] != p.shape[1]:
                raise SpecValidationError(
                    f"{name} has {v.shape[1]} arms, p has {p.shape[1]}", f"/strata/0/{name}")
        if p.shape[1] < 2:
            raise SpecValidationError("need at least two arms", "/strata/0/p")
        if np.any(mass < 0):
            s = int(np.flatnonzero(mass < 0)[0])
            raise SpecValidationError("mass must be non-negative", f"/strata/{s}/mass")
        if abs(mass.sum() - 1) > _TOL:
            raise SpecValidationError(f"masses sum to {mass.sum()!r}, not 1", "/strata")
        for s in range(S):
            if np.any(p[s] < 0) or np.any(p[s] > 1):
                raise SpecValidationError("probabilities must lie in [0, 1]", f"/strata/{s}/p")
            if abs(p[s].sum() - 1) > _TOL:
                raise SpecValidationError(f"probabilities sum to {p[s].sum()!r}, not 1",
                                          f"/strata/{s}/p")
            if np.any(sigma2[s] < 0):
                raise SpecValidationError("variances must be non-negative", f"/strata/{s}/sigma2")
        labels = tuple(self.labels) or tuple(str(s) for s in range(S))
        object.__setattr__(self, "labels", labels)

    @property
    def n_strata(self) -> int:
        return self.mass.shape[0]

    @property
    def n_treatments(self) -> int:
        return self.p.shape[1] - 1

    @property
    def tau(self) -> np.ndarray:
        """Conditional effects ``mu_k - mu_0``, shape ``(S, K)``."""
        return self.mu[:, 1:] - self.mu[:, [0]]

    def expect(self, values) -> np.ndarray:
        """Mass-weighted average over strata along the first axis."""
        return np.tensordot(self.mass, np.asarray(values, float), axes=(0, 0))

    # -- serialization -----------------------------------------------------
    @classmethod
    def from_dict(cls, doc: dict) -> "PopulationSpec":
        validator = jsonschema.Draft7Validator(SPEC_SCHEMA)
        errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
        if errors:
            e = errors[0]
            pointer = "".join(f"/{part}" for part in e.absolute_path)
            raise SpecValidationError(e.message, pointer)
        strata = doc["strata"]
        n_arms = len(strata[0]["p"])
        for s, st in enumerate(strata):
            for key in ("p", "mu", "sigma2"):
                if key in st and len(st[key]) != n_arms:
                    raise SpecValidationError(
                        f"expected {n_arms} entries, got {len(st[key])}", f"/strata/{s}/{key}")
        return cls(
            mass=[st["mass"] for st in strata],
            p=[st["p"] for st in strata],
            mu=[st["mu"] for st in strata],
            sigma2=[st.get("sigma2", [0.0] * n_arms) for st in strata],
            labels=tuple(st.get("label", str(s)) for s, st in enumerate(strata)),
        )

    def to_dict(self) -> dict:
        return {"strata": [
            {"label": lab, "mass": float(m), "p": self.p[s].tolist(),
             "mu": self.mu[s].tolist(), "sigma2": self.sigma2[s].tolist()}
            for s, (lab, m) in enumerate(zip(self.labels, self.mass))
        ]}

    @classmethod
    def load(cls, path) -> "PopulationSpec":
        with open(path, encoding="utf-8") as fh:
            try:
                doc = json.load(fh)
            except json.JSONDecodeError as exc:
                raise SpecValidationError(f"invalid JSON: {exc}") from None
        return cls.from_dict(doc)

    def dump(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def example_spec() -> PopulationSpec:
    """Two equal-mass schools with uneven small-class / aide assignment."""
    text = resources.files("contambias").joinpath("resources/example_spec.json").read_text("utf-8")
    return PopulationSpec.from_dict(json.loads(text))


@dataclass(eq=False)
class OracleResult:
    lambda_: np.ndarray
    beta: np.ndarray
    own: np.ndarray
    contamination: np.ndarray
    phi: Optional[float] = None

    def lambda_map(self, spec: PopulationSpec) -> dict:
        return dict(zip(spec.labels, self.lambda_))


def _v(p_treated: np.ndarray) -> np.ndarray:
    """Conditional covariance of the arm indicators, per stratum."""
    return np.einsum("sk,kl->skl", p_treated, np.eye(p_treated.shape[1])) - \
        p_treated[:, :, None] * p_treated[:, None, :]


def population_lambda(spec: PopulationSpec) -> np.ndarray:
    """Population weight matrices ``Lambda(w)``, shape ``(S, K, K)``."""
    v = _v(spec.p[:, 1:])
    Ev = spec.expect(v)
    sv = np.linalg.svd(Ev, compute_uv=False)
    if sv[-1] <= 1e-12 * max(sv[0], 1e-300):
        raise SingularAverageVariance("average treatment variance matrix is singular")
    return np.linalg.solve(Ev[None, :, :], v)


def population_phi(spec: PopulationSpec) -> float:
    """Weight on stratum 0 in the single-treatment, two-stratum case."""
    if spec.n_treatments != 1 or spec.n_strata != 2:
        raise ValidationError("phi is defined for one treatment and two strata")
    v = spec.p[:, 1] * (1 - spec.p[:, 1]) * spec.mass
    if v.sum() <= 0:
        raise ZeroVariance("treatment has zero variance in both strata")
    return float(v[0] / v.sum())


def population_beta(spec: PopulationSpec) -> OracleResult:
    lam = population_lambda(spec)
    tau = spec.tau
    contrib = spec.expect(lam * tau[:, None, :])
    own = np.diag(contrib).copy()
    contamination = contrib.sum(axis=1) - own
    phi = None
    if spec.n_treatments == 1 and spec.n_strata == 2:
        phi = population_phi(spec)
    return OracleResult(lam, own + contamination, own, contamination, phi)


def optimal_weights(spec: PopulationSpec, contrast="all_pairs", k: Optional[int] = None) -> np.ndarray:
    """Variance-minimizing stratum weights.

    ``contrast='single'`` with arm ``k``: ``p0 pk / (p0 + pk)``.
    ``contrast='all_pairs'``: ``1 / sum_k 1/p_k``.
    An array ``c`` of length K+1 gives ``1 / sum_k c_k^2 sigma_k^2 / p_k``.
    The first two are optimal under homoskedasticity.
    """
    p = spec.p
    if isinstance(contrast, str):
        if contrast == "single":
            if k is None or not 1 <= k <= spec.n_treatments:
                raise ValidationError("single contrast needs an arm k in 1..K")
            if np.any(p[:, 0] + p[:, k] == 0) or np.any(p[:, [0, k]] <= 0):
                raise ZeroPropensity(f"arm 0 or arm {k} has zero propensity in some stratum")
            return p[:, 0] * p[:, k] / (p[:, 0] + p[:, k])
        if contrast == "all_pairs":
            if np.any(p <= 0):
                raise ZeroPropensity("zero propensity in some stratum")
            return 1.0 / np.sum(1.0 / p, axis=1)
        raise ValidationError(f"unknown contrast {contrast!r}")
    c = np.asarray(contrast, float)
    if c.shape != (p.shape[1],):
        raise ValidationError("contrast must have K+1 entries")
    used = c != 0
    if np.any(p[:, used] <= 0):
        raise ZeroPropensity("zero propensity for an arm in the contrast")
    inv = np.sum(c[used] ** 2 * spec.sigma2[:, used] / p[:, used], axis=1)
    if np.any(inv <= 0):
        raise ZeroVariance("contrast has zero variance in some stratum")
    return 1.0 / inv


def efficiency_bound(spec: PopulationSpec, weights, contrast) -> float:
    """Known-propensity efficiency bound for a weighted contrast."""
    lam = np.asarray(weights, float).ravel()
    c = np.asarray(contrast, float)
    mean = spec.expect(lam)
    if mean == 0:
        raise ZeroMeanWeights("weights average to zero")
    used = c != 0
    if np.any(spec.p[:, used] <= 0):
        raise ZeroPropensity("zero propensity for an arm in the contrast")
    inner = lam ** 2 * np.sum(c[used] ** 2 * spec.sigma2[:, used] / spec.p[:, used], axis=1)
    return float(spec.expect(inner) / mean ** 2)


def estimands(spec: PopulationSpec) -> dict:
    """Population targets of each estimator kind (K-vectors)."""
    tau = spec.tau
    K = spec.n_treatments
    out = {"Uninteracted": population_beta(spec).beta, "ATE_interacted": spec.expect(tau)}
    single = np.empty(K)
    for k in range(1, K + 1):
        lk = optimal_weights(spec, "single", k)
        single[k - 1] = spec.expect(lk * tau[:, k - 1]) / spec.expect(lk)
    out["OneAtATime"] = single
    lc = optimal_weights(spec, "all_pairs")
    out["CommonWeights"] = spec.expect(lc[:, None] * tau) / spec.expect(lc)
    return out


def cell_scale_for(spec: PopulationSpec, max_rows: int = 10**6) -> int:
    """Smallest row count making every ``pi(w) p_k(w) N`` an integer."""
    scale = 1
    for x in (spec.mass[:, None] * spec.p).ravel():
        scale = lcm(scale, Fraction(float(x)).limit_denominator(10**7).denominator)
        if scale > max_rows:
            raise NonIntegralCells(f"exact enumeration needs more than {max_rows} rows")
    return scale


def enumerate_exact(spec: PopulationSpec, cell_scale: int) -> Dataset:
    """Dataset reproducing the population exactly.

    Cell ``(w, k)`` holds ``pi(w) p_k(w) cell_scale`` rows with outcome
    ``mu_k(w)``; the control is a categorical stratum column.
    """
    raw = spec.mass[:, None] * spec.p * cell_scale
    counts = np.rint(raw)
    if np.any(np.abs(raw - counts) > 1e-6 * np.maximum(1.0, np.abs(raw))):
        raise NonIntegralCells("pi(w) * p_k(w) * cell_scale is not integral for every cell")
    counts = counts.astype(int)
    s_idx, a_idx = np.nonzero(counts)
    reps = counts[s_idx, a_idx]
    strata = np.repeat(s_idx, reps)
    arms = np.repeat(a_idx, reps)
    return Dataset(
        outcome=spec.mu[strata, arms],
        treatment=arms,
        controls=strata[:, None].astype(float),
        control_names=("stratum",),
        control_kinds=(CATEGORICAL,),
        arm_names=tuple(str(a) for a in range(spec.p.shape[1])),
        control_levels={"stratum": list(spec.labels)},
    )


def simulate(spec: PopulationSpec, n: int, seed: int = 0) -> Dataset:
    """i.i.d. draws ``W ~ pi``, ``D | W ~ p(W)``, ``Y ~ Normal(mu_D(W), sigma2_D(W))``."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    rng = np.random.default_rng(seed)
    W = rng.choice(spec.n_strata, size=n, p=spec.mass / spec.mass.sum())
    cum = np.cumsum(spec.p[W], axis=1)
    D = np.minimum((rng.random(n)[:, None] >= cum).sum(axis=1), spec.n_treatments)
    noise = rng.standard_normal(n)
    Y = spec.mu[W, D] + np.sqrt(spec.sigma2[W, D]) * noise
    return Dataset(
        outcome=Y, treatment=D, controls=W[:, None].astype(float),
        control_names=("stratum",), control_kinds=(CATEGORICAL,),
        arm_names=tuple(str(a) for a in range(spec.p.shape[1])),
        control_levels={"stratum": list(spec.labels)},
    )


def random_spec(rng: np.random.Generator, n_strata: Optional[int] = None,
                n_treatments: Optional[int] = None, floor: float = 0.02) -> PopulationSpec:
    """Random spec: 2-6 strata, 1-4 treatments, floored flat-Dirichlet propensities."""
    S = n_strata or int(rng.integers(2, 7))
    K = n_treatments or int(rng.integers(1, 5))
    p = rng.dirichlet(np.ones(K + 1), size=S)
    p = np.maximum(p, floor)
    p /= p.sum(axis=1, keepdims=True)
    mass = rng.dirichlet(np.ones(S))
    mu = rng.normal(0.0, 1.0, size=(S, K + 1))
    sigma2 = rng.uniform(0.5, 2.0, size=(S, K + 1))
    return PopulationSpec(mass, p, mu, sigma2)


def random_integral_spec(rng: np.random.Generator, n_strata: Optional[int] = None,
                         n_treatments: Optional[int] = None,
                         max_cell: int = 12) -> tuple:
    """Random spec with rational cell masses; returns ``(spec, cell_scale)``."""
    S = n_strata or int(rng.integers(2, 7))
    K = n_treatments or int(rng.integers(1, 5))
    counts = rng.integers(1, max_cell + 1, size=(S, K + 1))
    N = int(counts.sum())
    mass = counts.sum(axis=1) / N
    p = counts / counts.sum(axis=1, keepdims=True)
    mu = rng.normal(0.0, 1.0, size=(S, K + 1))
    sigma2 = rng.uniform(0.5, 2.0, size=(S, K + 1))
    return PopulationSpec(mass, p, mu, sigma2), N
