import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from contambias.data import CATEGORICAL, CONTINUOUS, Dataset

settings.register_profile(
    "default", max_examples=60, deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def strata_dataset(rng, n_strata=4, n_arms=3, per_cell=(3, 12), tau=None, noise=1.0,
                   constant_tau=None):
    """Categorical-strata dataset with every stratum x arm cell populated.

    Cell sizes are drawn per cell so propensities differ across strata.
    ``constant_tau`` (length K) makes effects homogeneous.
    """
    K = n_arms - 1
    counts = rng.integers(per_cell[0], per_cell[1] + 1, size=(n_strata, n_arms))
    W = np.repeat(np.arange(n_strata), counts.sum(axis=1))
    D = np.concatenate([np.repeat(np.arange(n_arms), counts[s]) for s in range(n_strata)])
    mu0 = rng.normal(0, 2, size=n_strata)
    if constant_tau is not None:
        eff = np.tile(np.asarray(constant_tau, float), (n_strata, 1))
    elif tau is not None:
        eff = np.asarray(tau, float)
    else:
        eff = rng.normal(0, 1, size=(n_strata, K))
    full = np.column_stack([np.zeros(n_strata), eff])
    Y = mu0[W] + full[W, D] + noise * rng.standard_normal(W.shape[0])
    return Dataset(
        Y, D, W[:, None].astype(float), ("w",), (CATEGORICAL,),
        tuple(str(a) for a in range(n_arms)), {"w": [f"s{s}" for s in range(n_strata)]},
    )


def continuous_dataset(rng, n=300, n_arms=3):
    """Dataset with one continuous control and arm probabilities depending on it."""
    x = rng.normal(size=n)
    logits = np.column_stack([np.zeros(n)] + [0.5 * k * x for k in range(1, n_arms)])
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    D = (rng.random(n)[:, None] > np.cumsum(p, axis=1)).sum(axis=1)
    D = np.minimum(D, n_arms - 1)
    D[:n_arms] = np.arange(n_arms)
    Y = x + 0.3 * D * x + D + rng.standard_normal(n)
    return Dataset(Y, D, x[:, None], ("x",), (CONTINUOUS,), tuple(str(a) for a in range(n_arms)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line per acceptance criterion, then assert it."""
    lines = request.config.stash[_ACCEPTANCE]

    def record(label, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] {label}: {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    def skip(label, reason):
        lines.append(f"[SKIP] {label}: {reason}")
        pytest.skip(reason)

    record.skip = skip
    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
