"""Monte Carlo harness: repeated draws from a population, every estimator per draw."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from . import estimators as est
from .exceptions import ContaminationBiasError
from .oracle import PopulationSpec, estimands, simulate

KINDS = ("Uninteracted", "ATE_interacted", "OneAtATime", "CommonWeights")


@dataclass(eq=False)
class EstimatorSummary:
    kind: str
    estimand: np.ndarray
    mean: np.ndarray
    bias: np.ndarray
    mc_se: np.ndarray
    sd: np.ndarray
    mean_se: np.ndarray
    coverage: np.ndarray

    def to_dict(self) -> dict:
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v)
                for k, v in self.__dict__.items()}


@dataclass(eq=False)
class MonteCarloResult:
    n: int
    reps: int
    seed: int
    n_failed: int
    summaries: dict
    draws: dict = field(repr=False, default_factory=dict)


def _one_rep(spec: PopulationSpec, n: int, seed: int, r: int):
    ds = simulate(spec, n, seed=[seed, r])
    out = {}
    for kind in KINDS:
        res = est.ESTIMATORS[kind](ds)
        out[kind] = (res.beta, res.se_robust)
    return out


def monte_carlo(spec: PopulationSpec, n: int, reps: int, seed: int = 0,
                n_jobs: int = 1, level: float = 0.95) -> MonteCarloResult:
    """Run ``reps`` simulations; replicate ``r`` uses seed ``[seed, r]``.

    Replicates whose estimators fail (e.g. an empty stratum x arm cell) are
    counted in ``n_failed`` and left out of the summaries.
    """
    targets = estimands(spec)
    z = stats.norm.ppf(0.5 + level / 2)

    def run(r):
        try:
            return _one_rep(spec, n, seed, r)
        except ContaminationBiasError:
            return None

    if n_jobs == 1:
        results = [run(r) for r in range(reps)]
    else:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, range(reps)))
    ok = [r for r in results if r is not None]
    summaries, draws = {}, {}
    for kind in KINDS:
        b = np.array([r[kind][0] for r in ok])
        s = np.array([r[kind][1] for r in ok])
        target = targets[kind]
        m = len(ok)
        sd = b.std(axis=0, ddof=1) if m > 1 else np.zeros(spec.n_treatments)
        covered = np.abs(b - target) <= z * s
        summaries[kind] = EstimatorSummary(
            kind, target, b.mean(axis=0), b.mean(axis=0) - target,
            sd / np.sqrt(m), sd, s.mean(axis=0), covered.mean(axis=0),
        )
        draws[kind] = (b, s)
    return MonteCarloResult(n, reps, seed, reps - len(ok), summaries, draws)
