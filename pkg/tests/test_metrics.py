import numpy as np
import pytest

from tailfactor import TruthBundle, align_and_score, generate, msre, msre_eot, msre_surface
from tailfactor.dgp import DgpSpec
from tailfactor.exceptions import ArgumentError


def pareto_truth(vol, lam=2.0, c_ref=1.4):
    return TruthBundle(vol_surface=vol, lam=lam, family="pareto", c_ref=c_ref)


class TestMsre:
    def test_perfect_fit_is_zero(self):
        rng = np.random.default_rng(0)
        L = rng.uniform(0.5, 1.5, size=(1, 6))
        F = rng.uniform(0.5, 1.5, size=(1, 8))
        truth = pareto_truth(L.T @ F)
        tau = 0.1
        scale = truth.excess_marginal_quantile(tau)
        assert msre(L, F, scale, truth, tau) == pytest.approx(0.0, abs=1e-28)

    def test_hand_instance(self):
        # all true quantiles 2, all fitted 1, reference quantile 2
        truth = TruthBundle(
            vol_surface=np.full((2, 2), 2.0), lam=1.0, family="pareto", c_ref=2.0
        )
        tau = 0.5  # marginal quantile (2 tau)^(-1) = 1, reference = 2
        value = msre(np.ones((1, 2)), np.ones((1, 2)), 1.0, truth, tau)
        assert value == pytest.approx(0.25)

    def test_pareto_marginal_quantile(self):
        truth = pareto_truth(np.ones((2, 2)), lam=2.0)
        assert truth.excess_marginal_quantile(0.1) == pytest.approx(0.2 ** -0.5)
        assert truth.reference_quantile(0.1) == pytest.approx(1.4 * 0.2 ** -0.5)

    def test_symmetrized_pareto_quantile_against_pooled_draws(self):
        # the signed innovation u*b has upper tau-tail quantile (2 tau)^(-1/lam):
        # check against the empirical quantile of 1e7 pooled draws
        rng = np.random.default_rng(99)
        n = 10_000_000
        lam = 2.0
        u = rng.random(n) ** (-1.0 / lam)
        b = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        pooled = u * b
        for tau in (0.1, 0.05):
            empirical = np.quantile(pooled, 1.0 - tau)
            formula = (2.0 * tau) ** (-1.0 / lam)
            assert empirical == pytest.approx(formula, rel=2e-3)

    def test_student_t_marginal_quantile(self):
        truth = TruthBundle(np.ones((2, 2)), lam=2.0, family="student_t", c_ref=1.0)
        from scipy.stats import t as student_t

        assert truth.excess_marginal_quantile(0.1) == pytest.approx(
            student_t.ppf(0.9, df=2.0)
        )

    def test_central_surface_requires_eot_scorer(self):
        truth = TruthBundle(
            np.ones((2, 2)), lam=2.0, family="pareto", c_ref=1.0,
            central_surface=np.ones((2, 2)),
        )
        with pytest.raises(ArgumentError, match="msre_eot"):
            msre(np.ones((1, 2)), np.ones((1, 2)), 1.0, truth, 0.1)

    def test_zero_threshold_identity(self):
        rng = np.random.default_rng(1)
        truth = pareto_truth(rng.uniform(0.5, 2.0, size=(4, 5)))
        L = rng.uniform(0.5, 1.5, size=(2, 4))
        F = rng.uniform(0.5, 1.5, size=(2, 5))
        a = msre(L, F, 3.0, truth, 0.1)
        b = msre_eot(0.0, L, F, 3.0, truth, 0.1)
        assert a == pytest.approx(b, rel=1e-14)

    def test_shape_mismatch(self):
        truth = pareto_truth(np.ones((3, 3)))
        with pytest.raises(ArgumentError):
            msre(np.ones((1, 2)), np.ones((1, 3)), 1.0, truth, 0.1)

    def test_dgp4_conditional_truth(self):
        sample = generate(DgpSpec(4, 10, 10, 2.0, seed=2))
        truth = TruthBundle.from_sample(sample)
        tau = 0.1
        surface = truth.conditional_quantile_surface(tau)
        expected = sample.true_threshold + sample.volatility_surface() * truth.excess_marginal_quantile(tau)
        np.testing.assert_allclose(surface, expected)
        # perfect estimate scores zero
        assert msre_surface(surface, truth, tau) == 0.0


class TestAlignAndScore:
    def test_sign_flips_absorbed(self):
        rng = np.random.default_rng(3)
        F = rng.normal(size=(2, 9))
        L = rng.normal(size=(2, 7))
        S, l_err, f_err = align_and_score(F, -F, L, -L)
        assert l_err == pytest.approx(0.0, abs=1e-12)
        assert f_err == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_array_equal(np.diag(S), [-1.0, -1.0])

    def test_identity(self):
        rng = np.random.default_rng(4)
        F = rng.normal(size=(1, 5))
        L = rng.normal(size=(1, 6))
        S, l_err, f_err = align_and_score(F, F, L, L)
        assert (l_err, f_err) == (0.0, 0.0)
        assert S[0, 0] == 1.0

    def test_perturbation_norm_exact(self):
        rng = np.random.default_rng(5)
        F = rng.normal(size=(2, 10))
        L = rng.normal(size=(2, 8))
        delta = rng.normal(size=(2, 8)) * 0.01
        _, l_err, _ = align_and_score(F, F, L, L + delta)
        assert l_err == pytest.approx(np.linalg.norm(delta) / np.sqrt(8), rel=1e-12)

    def test_mixed_sign_rows(self):
        rng = np.random.default_rng(6)
        F = rng.normal(size=(2, 9))
        L = rng.normal(size=(2, 7))
        F_hat = F * np.array([[1.0], [-1.0]])
        L_hat = L * np.array([[1.0], [-1.0]])
        S, l_err, f_err = align_and_score(F, F_hat, L, L_hat)
        np.testing.assert_array_equal(np.diag(S), [1.0, -1.0])
        assert l_err == pytest.approx(0.0, abs=1e-12)
        assert f_err == pytest.approx(0.0, abs=1e-12)

    def test_shape_checks(self):
        with pytest.raises(ArgumentError):
            align_and_score(np.ones((2, 3)), np.ones((2, 4)), np.ones((2, 3)), np.ones((2, 3)))
