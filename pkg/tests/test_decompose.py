import itertools

import numpy as np
import pytest

from contambias.data import CATEGORICAL, Dataset, encode_treatments
from contambias.decompose import (
    conditional_ates,
    decompose_beta,
    decomposition_se,
    heterogeneity_sd,
    lambda_matrices,
    scatter_table,
    weight_effect_correlation,
    worst_case_bounds,
)
from contambias.exceptions import EmptyCell, RankDeficient, ValidationError
from contambias.oracle import enumerate_exact, example_spec

from conftest import continuous_dataset, strata_dataset


def _within_stratum_lambda(ds):
    """Independent route: residuals by explicit within-stratum demeaning."""
    X = encode_treatments(ds)
    w = ds.controls[:, 0].astype(int)
    Xd = X.copy()
    for s in np.unique(w):
        Xd[w == s] -= X[w == s].mean(axis=0)
    G = np.linalg.inv(Xd.T @ Xd)
    return np.stack([G @ np.outer(Xd[i], X[i]) for i in range(ds.n)])


def _cell_mean_effects(ds):
    w = ds.controls[:, 0].astype(int)
    S, K = w.max() + 1, ds.n_treatments
    tau = np.empty((S, K))
    for s in range(S):
        m0 = ds.outcome[(w == s) & (ds.treatment == 0)].mean()
        for k in range(1, K + 1):
            tau[s, k - 1] = ds.outcome[(w == s) & (ds.treatment == k)].mean() - m0
    return tau


class TestLambdaMatrices:
    def test_matches_within_stratum_demeaning(self, rng):
        ds = strata_dataset(rng, n_strata=4, n_arms=4)
        d = decompose_beta(ds)
        np.testing.assert_allclose(d.lambda_per_obs, _within_stratum_lambda(ds), atol=1e-10)

    def test_sum_is_identity(self, rng):
        ds = strata_dataset(rng, n_strata=5, n_arms=3)
        d = decompose_beta(ds)
        np.testing.assert_allclose(d.lambda_per_obs.sum(axis=0), np.eye(2), atol=1e-8)

    def test_balanced_single_stratum_is_identity(self):
        D = np.repeat([0, 1, 2], 4)
        X = encode_treatments(Dataset(np.zeros(12), D, np.zeros((12, 0)), arm_names=("a", "b", "c")))
        lam = lambda_matrices(X, np.ones((12, 1)))
        np.testing.assert_allclose(lam.sum(axis=0), np.eye(2), atol=1e-12)
        per_arm = [lam[D == a].sum(axis=0) for a in range(3)]
        np.testing.assert_allclose(per_arm[1][:, 1], 0, atol=1e-12)
        np.testing.assert_allclose(per_arm[2][:, 0], 0, atol=1e-12)

    def test_rank_deficient_joint_design(self):
        D = np.array([0, 1, 0, 1])
        X = D[:, None].astype(float)
        W = np.column_stack([np.ones(4), D])
        with pytest.raises(RankDeficient):
            lambda_matrices(X, W)

    def test_worked_example_stratum_weights(self):
        d = decompose_beta(enumerate_exact(example_spec(), 2000))
        lam = d.lambda_map()
        assert lam["school0"][0, 1] == pytest.approx(99 / 106, abs=1e-10)
        assert lam["school1"][0, 1] == pytest.approx(-99 / 106, abs=1e-10)

    def test_binary_two_strata_phi(self, rng):
        ds = strata_dataset(rng, n_strata=2, n_arms=2)
        d = decompose_beta(ds)
        w = ds.controls[:, 0].astype(int)
        n_w = np.bincount(w)
        p = np.array([ds.treatment[w == s].mean() for s in range(2)])
        v = p * (1 - p) * n_w / ds.n
        phi = v[0] / v.sum()
        lam = d.lambda_per_stratum[:, 0, 0]
        assert np.all(lam >= 0)
        np.testing.assert_allclose(lam / lam.sum(), (p * (1 - p)) / (p * (1 - p)).sum(),
                                   atol=1e-12)
        tau = d.tau_hat_per_stratum[:, 0]
        assert d.own_component[0] == pytest.approx(phi * tau[0] + (1 - phi) * tau[1], abs=1e-10)


class TestConditionalATEs:
    def test_one_stratum_difference_in_means(self, rng):
        D = np.repeat([0, 1, 2], [5, 6, 7])
        Y = rng.normal(size=18)
        ds = Dataset(Y, D, np.zeros((18, 0)), arm_names=("0", "1", "2"))
        c = conditional_ates(ds)
        expected = [Y[D == k].mean() - Y[D == 0].mean() for k in (1, 2)]
        np.testing.assert_allclose(c.tau[0], expected, atol=1e-12)

    def test_group_mean_oracle(self, rng):
        ds = strata_dataset(rng, n_strata=5, n_arms=3)
        c = conditional_ates(ds)
        np.testing.assert_allclose(c.tau, _cell_mean_effects(ds), atol=1e-10)

    def test_worked_example_recovers_effects(self):
        c = conditional_ates(enumerate_exact(example_spec(), 2000))
        np.testing.assert_allclose(c.tau, [[0, 0], [0, 1]], atol=1e-12)

    def test_standard_errors_match_cell_formula(self, rng):
        # HC0 of a saturated model gives var = s0^2/n0 + sk^2/nk with ddof-0 cell variances
        ds = strata_dataset(rng, n_strata=3, n_arms=2)
        c = conditional_ates(ds, flavor="HC0")
        w = ds.controls[:, 0].astype(int)
        for s in range(3):
            y0 = ds.outcome[(w == s) & (ds.treatment == 0)]
            y1 = ds.outcome[(w == s) & (ds.treatment == 1)]
            se = np.sqrt(y0.var() / y0.size + y1.var() / y1.size)
            assert c.se[s, 0] == pytest.approx(se, rel=1e-9)

    def test_empty_stratum_excluded(self, rng):
        base = strata_dataset(rng, n_strata=3, n_arms=3)
        w = base.controls[:, 0]
        keep = ~((w == 2) & (base.treatment == 1))
        ds = base.subset(np.flatnonzero(keep))
        c = conditional_ates(ds)
        assert c.excluded == ["s2"]
        assert np.all(np.isnan(c.tau[2]))
        d = decompose_beta(ds)
        assert any("excluded" in msg for msg in d.warnings)

    def test_all_strata_missing_an_arm(self):
        W = np.array([0, 0, 1, 1])
        D = np.array([0, 1, 0, 2])
        ds = Dataset(np.zeros(4), D, W[:, None], ("w",), (CATEGORICAL,), ("0", "1", "2"),
                     {"w": ["a", "b"]})
        with pytest.raises(EmptyCell):
            conditional_ates(ds)


class TestDecomposeBeta:
    def test_identity_with_regression(self, rng):
        ds = strata_dataset(rng, n_strata=6, n_arms=4)
        d = decompose_beta(ds)
        np.testing.assert_allclose(d.own_component + d.contamination_component, d.beta_hat,
                                   atol=1e-8)

    def test_mass_weighted_stratum_means(self, rng):
        ds = strata_dataset(rng, n_strata=5, n_arms=3)
        d = decompose_beta(ds)
        mean = np.tensordot(d.stratum_masses / ds.n, d.lambda_per_stratum, axes=(0, 0))
        np.testing.assert_allclose(mean, np.eye(2), atol=1e-8)

    def test_constant_effects_no_contamination(self, rng):
        ds = strata_dataset(rng, n_strata=5, n_arms=4, constant_tau=[1.5, -2.0, 0.25], noise=0.0)
        d = decompose_beta(ds)
        np.testing.assert_allclose(d.contamination_component, 0, atol=1e-8)
        np.testing.assert_allclose(d.own_component, [1.5, -2.0, 0.25], atol=1e-8)

    def test_injected_constant_shift_is_linear(self, rng):
        ds = strata_dataset(rng, n_strata=5, n_arms=4)
        tau = np.array([1.5, -2.0, 0.25])
        shifted = ds.with_outcome(ds.outcome + encode_treatments(ds) @ tau)
        a, b = decompose_beta(ds), decompose_beta(shifted)
        np.testing.assert_allclose(b.contamination_component, a.contamination_component,
                                   atol=1e-8)
        np.testing.assert_allclose(b.own_component - a.own_component, tau, atol=1e-8)

    def test_worked_example(self):
        d = decompose_beta(enumerate_exact(example_spec(), 2000))
        assert d.beta_hat[0] == pytest.approx(-99 / 212, abs=1e-10)
        assert d.own_component[0] == pytest.approx(0, abs=1e-10)
        assert d.contamination_component[0] == pytest.approx(-99 / 212, abs=1e-10)

    def test_continuous_controls_identity(self, rng):
        ds = continuous_dataset(rng, n=200)
        d = decompose_beta(ds)
        np.testing.assert_allclose(d.own_component + d.contamination_component, d.beta_hat,
                                   atol=1e-8)
        np.testing.assert_allclose(d.lambda_per_obs.sum(axis=0), np.eye(2), atol=1e-8)

    def test_negative_weights_reported_for_linear_controls(self):
        # treated shares .1/.9/.95 at x = 0/1/2; the linear fit exceeds one at x = 2
        x = np.repeat([0.0, 1.0, 2.0], 20)
        D = np.concatenate([np.r_[np.ones(k), np.zeros(20 - k)] for k in (2, 18, 19)]).astype(int)
        ds = Dataset(np.arange(60.0), D, x[:, None], ("x",), ("continuous",), ("0", "1"))
        d = decompose_beta(ds)
        lam = d.lambda_per_stratum[:, 0, 0]
        assert lam[2] < 0 < lam[0]
        assert any("negative own-treatment" in w for w in d.warnings)
        np.testing.assert_allclose(d.own_component + d.contamination_component, d.beta_hat,
                                   atol=1e-8)


class TestWorstCaseBounds:
    def test_bracket_observed(self, rng):
        ds = strata_dataset(rng, n_strata=6, n_arms=3)
        d = decompose_beta(ds)
        b = worst_case_bounds(d)
        assert np.all(b.lower <= d.contamination_component + 1e-12)
        assert np.all(d.contamination_component <= b.upper + 1e-12)

    def test_constant_effects_zero_bounds(self, rng):
        ds = strata_dataset(rng, n_strata=5, n_arms=3, constant_tau=[1.0, 2.0], noise=0.0)
        b = worst_case_bounds(decompose_beta(ds))
        np.testing.assert_allclose(b.lower, 0, atol=1e-10)
        np.testing.assert_allclose(b.upper, 0, atol=1e-10)

    def test_two_strata_closed_form(self):
        d = decompose_beta(enumerate_exact(example_spec(), 2000))
        a = d.lambda_sums[0, 0, 1]
        assert d.lambda_sums[1, 0, 1] == pytest.approx(-a, abs=1e-12)
        b = worst_case_bounds(d)
        t = d.tau_hat_per_stratum[:, 1]
        assert b.upper[0] == pytest.approx(abs(a) * abs(t[0] - t[1]), abs=1e-12)
        assert b.lower[0] == pytest.approx(-abs(a) * abs(t[0] - t[1]), abs=1e-12)

    def test_matches_brute_force_permutations(self, rng):
        ds = strata_dataset(rng, n_strata=5, n_arms=3)
        d = decompose_beta(ds)
        b = worst_case_bounds(d)
        for k in range(2):
            lo = up = 0.0
            for l in range(2):
                if l == k:
                    continue
                s = d.lambda_sums[:, k, l]
                t = d.tau_hat_per_stratum[:, l]
                vals = [s @ t[list(perm)] for perm in itertools.permutations(range(5))]
                lo += min(vals)
                up += max(vals)
            assert b.lower[k] == pytest.approx(lo, abs=1e-12)
            assert b.upper[k] == pytest.approx(up, abs=1e-12)

    def test_permutations_attain_bounds(self, rng):
        ds = strata_dataset(rng, n_strata=4, n_arms=3)
        d = decompose_beta(ds)
        b = worst_case_bounds(d)
        piece = b.pairs[(0, 1)]
        s = d.lambda_sums[:, 0, 1]
        t = d.tau_hat_per_stratum[:, 1]
        assert s @ t[piece["upper_perm"]] == pytest.approx(piece["upper"], abs=1e-12)
        assert s @ t[piece["lower_perm"]] == pytest.approx(piece["lower"], abs=1e-12)

    def test_needs_two_strata(self, rng):
        D = np.repeat([0, 1], 5)
        ds = Dataset(rng.normal(size=10), D, np.zeros((10, 0)), arm_names=("0", "1"))
        with pytest.raises(ValidationError):
            worst_case_bounds(decompose_beta(ds))


class TestCorrelation:
    def test_constant_effect_undefined(self, rng):
        ds = strata_dataset(rng, n_strata=4, n_arms=2, constant_tau=[1.0], noise=0.0)
        c = weight_effect_correlation(decompose_beta(ds))
        assert not c.defined[0, 0]
        assert np.isnan(c.corr[0, 0])

    def test_collinear_weights_and_effects(self):
        # tau set equal to an affine map of the own weights
        ds0 = enumerate_exact(example_spec(), 2000)
        d0 = decompose_beta(ds0)
        lam = d0.lambda_per_stratum[:, 1, 1]
        w = ds0.controls[:, 0].astype(int)
        Y = np.where(ds0.treatment == 2, 3.0 * lam[w] + 1.0, 0.0)
        c = weight_effect_correlation(decompose_beta(ds0.with_outcome(Y)))
        assert c.corr[1, 1] == pytest.approx(1.0, abs=1e-12)

    def test_matches_weighted_pearson(self, rng):
        ds = strata_dataset(rng, n_strata=6, n_arms=3)
        d = decompose_beta(ds)
        c = weight_effect_correlation(d)
        x = d.lambda_per_stratum[:, 0, 0]
        y = d.tau_hat_per_stratum[:, 0]
        w = d.stratum_masses
        cov = np.cov(x, y, aweights=w, ddof=0)
        assert c.corr[0, 0] == pytest.approx(cov[0, 1] / np.sqrt(cov[0, 0] * cov[1, 1]),
                                             abs=1e-12)

    def test_scatter_table_columns(self, rng):
        d = decompose_beta(strata_dataset(rng, n_strata=3, n_arms=3))
        df = scatter_table(d)
        assert len(df) == 3
        for col in ("stratum", "mass", "lambda_1_1", "lambda_1_2", "tau_1", "tau_2", "se_1"):
            assert col in df.columns


class TestHeterogeneitySD:
    def test_noiseless_equals_raw(self):
        c = conditional_ates(enumerate_exact(example_spec(), 2000))
        h = heterogeneity_sd(c)
        np.testing.assert_allclose(h.sd, h.raw_sd, atol=1e-12)
        assert h.sd[1] == pytest.approx(0.5, abs=1e-12)
        assert not h.clamped.any()

    def test_pure_noise_mostly_clamped(self):
        clamped = 0
        for seed in range(30):
            r = np.random.default_rng(seed)
            ds = strata_dataset(r, n_strata=8, n_arms=2, constant_tau=[0.5], per_cell=(4, 8))
            clamped += heterogeneity_sd(conditional_ates(ds)).clamped[0]
        assert clamped >= 20

    def test_formula(self, rng):
        c = conditional_ates(strata_dataset(rng, n_strata=6, n_arms=3))
        h = heterogeneity_sd(c)
        w = c.masses / c.masses.sum()
        var = w @ (c.tau - w @ c.tau) ** 2
        adj = var - w @ c.se ** 2
        np.testing.assert_allclose(h.sd, np.sqrt(np.maximum(adj, 0)), atol=1e-14)


class TestBootstrap:
    def test_deterministic(self, rng):
        ds = strata_dataset(rng, n_strata=3, n_arms=3)
        a = decomposition_se(ds, B=20, seed=5)
        b = decomposition_se(ds, B=20, seed=5)
        for key in a.se:
            np.testing.assert_array_equal(a.se[key], b.se[key])

    def test_job_count_invariant(self, rng):
        ds = strata_dataset(rng, n_strata=3, n_arms=3)
        a = decomposition_se(ds, B=16, seed=1, n_jobs=1)
        b = decomposition_se(ds, B=16, seed=1, n_jobs=4)
        np.testing.assert_array_equal(a.replicates["beta"], b.replicates["beta"])

    def test_zero_noise_fixed_design(self):
        ds = enumerate_exact(example_spec(), 200)
        bs = decomposition_se(ds, B=10, seed=0, scheme="cells")
        for v in bs.se.values():
            np.testing.assert_allclose(v, 0, atol=1e-12)

    def test_close_to_sandwich(self):
        r = np.random.default_rng(11)
        ds = strata_dataset(r, n_strata=4, n_arms=3, per_cell=(40, 80), constant_tau=[1, 2])
        bs = decomposition_se(ds, B=400, seed=3)
        d = decompose_beta(ds, flavor="HC0")
        np.testing.assert_allclose(bs.se["beta"], d.beta_se, rtol=0.2)

    def test_redraws_counted(self):
        r = np.random.default_rng(2)
        ds = strata_dataset(r, n_strata=3, n_arms=3, per_cell=(2, 3))
        bs = decomposition_se(ds, B=20, seed=0)
        assert bs.n_redrawn > 0
        assert bs.n_redrawn + bs.B <= 10 * bs.B

    def test_too_few_replicates(self, rng):
        with pytest.raises(ValidationError):
            decomposition_se(strata_dataset(rng), B=1)
