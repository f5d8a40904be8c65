import numpy as np
import pytest

from tailfactor import (
    FactorizedTailVolatility,
    check_loss,
    degenerate_quantiles,
    fit_ftvm,
    normalize_identification,
    predict_quantiles,
)
from tailfactor.dgp import DgpSpec, generate
from tailfactor.evt import tail_estimates
from tailfactor.exceptions import ArgumentError, RankError
from tailfactor.ftvm import FactorModel, FitOptions
from tailfactor.panel import PanelData, TailConfig

FAST = FitOptions(seed=0, n_restarts=2)


def objective(panel, model, tail, tau):
    z = panel.values / tail.u_intermediate
    return float(np.sum(check_loss(z - model.volatility_surface(), tau)))


class TestNormalizeIdentification:
    def test_scalar_example(self):
        model = FactorModel(r=1, loadings=np.full((1, 4), 2.0), factors=np.full((1, 6), 3.0))
        normed, signs = normalize_identification(model)
        np.testing.assert_allclose((normed.factors @ normed.factors.T) / 6, [[1.0]], atol=1e-12)
        np.testing.assert_allclose(
            normed.volatility_surface(), model.volatility_surface(), atol=1e-12
        )
        assert normed.factors[0, 0] > 0
        assert signs.shape == (1, 1)

    def test_product_invariance_random(self):
        rng = np.random.default_rng(5)
        model = FactorModel(r=2, loadings=rng.normal(size=(2, 8)), factors=rng.normal(size=(2, 11)))
        normed, _ = normalize_identification(model)
        assert (
            np.abs(normed.volatility_surface() - model.volatility_surface()).max() < 1e-10
        )
        T = model.factors.shape[1]
        np.testing.assert_allclose((normed.factors @ normed.factors.T) / T, np.eye(2), atol=1e-10)
        G = (normed.loadings @ normed.loadings.T) / 8
        off = G - np.diag(np.diag(G))
        assert np.abs(off).max() < 1e-10
        assert G[0, 0] >= G[1, 1]

    def test_idempotent_up_to_sign(self):
        rng = np.random.default_rng(6)
        model = FactorModel(r=2, loadings=rng.normal(size=(2, 6)), factors=rng.normal(size=(2, 9)))
        once, _ = normalize_identification(model)
        twice, _ = normalize_identification(once)
        np.testing.assert_allclose(twice.loadings, once.loadings, atol=1e-9)
        np.testing.assert_allclose(twice.factors, once.factors, atol=1e-9)

    def test_rank_deficient_rejected(self):
        f1 = np.arange(1.0, 6.0)
        model = FactorModel(r=2, loadings=np.ones((2, 4)), factors=np.vstack([f1, 2 * f1]))
        with pytest.raises(RankError):
            normalize_identification(model)


class TestFitFtvm:
    def test_constant_rank_one_panel(self):
        panel = PanelData(np.ones((2, 3)))
        cfg = TailConfig(k=2, m=0.1, M=1.6)
        res = fit_ftvm(panel, 1, cfg, FAST)
        np.testing.assert_allclose(res.model.volatility_surface(), np.ones((2, 3)), atol=1e-9)
        assert res.final_loss == pytest.approx(0.0, abs=1e-12)
        assert res.tail.u_intermediate == 1.0

    def test_r_validation(self):
        panel = PanelData(np.ones((3, 3)) + np.arange(9).reshape(3, 3))
        cfg = TailConfig(k=3)
        with pytest.raises(ArgumentError):
            fit_ftvm(panel, 0, cfg, FAST)
        with pytest.raises(ArgumentError):
            fit_ftvm(panel, 4, cfg, FAST)

    def test_infeasible_bounds(self):
        panel = PanelData(np.arange(9.0).reshape(3, 3) + 1)
        with pytest.raises(ArgumentError, match="m"):
            fit_ftvm(panel, 1, TailConfig(k=3, m=1.0, M=1.0), FAST)

    def test_loss_trace_nonincreasing_and_feasible(self):
        for rep in range(6):
            sample = generate(DgpSpec(1, 14, 16, 2.0, seed=rep))
            cfg = TailConfig(k=22, m=0.1, M=1.6)
            res = fit_ftvm(sample.panel, 1 + rep % 2, cfg, FAST)
            trace = np.array(res.loss_trace)
            assert np.all(np.diff(trace) <= 1e-9 * np.maximum(trace[:-1], 1.0))
            surface = res.model.volatility_surface()
            assert surface.min() > cfg.m
            assert surface.max() <= cfg.M

    def test_final_loss_recomputable(self):
        sample = generate(DgpSpec(1, 20, 20, 2.0, seed=3))
        cfg = TailConfig(k=40)
        res = fit_ftvm(sample.panel, 1, cfg, FAST)
        tau = cfg.intermediate_tau(400)
        recomputed = objective(sample.panel, res.model, res.tail, tau)
        assert res.final_loss == pytest.approx(recomputed, rel=1e-10)

    def test_tiny_instance_grid_oracle(self):
        # 3x3, r=1, k=3: the fit must at least match a 2000-point feasible
        # search over gauge-fixed (l, f) with ||f||^2 / T = 1
        rng = np.random.default_rng(7)
        panel = PanelData(rng.pareto(2.0, size=(3, 3)) + 0.5)
        cfg = TailConfig(k=3, m=0.1, M=1.6)
        res = fit_ftvm(panel, 1, cfg, FitOptions(seed=0, n_restarts=5))
        tau = cfg.intermediate_tau(9)
        tail = tail_estimates(panel, 3)
        z = panel.values / tail.u_intermediate

        best = np.inf
        draws = 0
        gen = np.random.default_rng(99)
        while draws < 2000:
            f = np.abs(gen.normal(size=3)) + 1e-3
            f = f * np.sqrt(3) / np.linalg.norm(f)
            lo, hi = cfg.m / f.min(), cfg.M / f.max()
            if lo >= hi:
                continue
            for l_point in np.linspace(lo, hi, 8):
                l = np.full(3, l_point) + gen.uniform(-0.05, 0.05, size=3)
                surface = np.outer(l, f)
                if surface.min() <= cfg.m or surface.max() > cfg.M:
                    continue
                best = min(best, float(np.sum(check_loss(z - surface, tau))))
                draws += 1
                if draws >= 2000:
                    break
        assert res.final_loss <= best + 1e-6

    def test_warm_start_accepted(self):
        sample = generate(DgpSpec(1, 12, 12, 2.0, seed=11))
        cfg = TailConfig(k=14)
        base = fit_ftvm(sample.panel, 1, cfg, FAST)
        warm = (base.model.loadings, base.model.factors)
        res = fit_ftvm(sample.panel, 1, cfg, FAST, warm_start=warm)
        assert res.restarts_used == 3
        assert res.final_loss <= base.final_loss + 1e-9

    def test_overfitting_guard_large_upper_bound(self):
        # wide box interpolates panel cells far above the pooled threshold;
        # the recommended box cannot reach them
        sample = generate(DgpSpec(3, 50, 50, 1.0, seed=1))
        k = 250
        tall = tail_estimates(sample.panel, k)
        y = sample.panel.values
        big = y > 2.0 * tall.u_intermediate
        assert big.any()
        hits = {}
        for M in (1.6, 32.0):
            fit = fit_ftvm(sample.panel, 2, TailConfig(k=k, m=0.1, M=M), FitOptions(seed=0))
            est = fit.model.volatility_surface() * fit.tail.u_intermediate
            rel = np.abs(est[big] - y[big]) / y[big]
            hits[M] = int(np.sum(rel < 1e-3))
        assert hits[32.0] >= 1
        assert hits[1.6] == 0


class TestPredictQuantiles:
    def _fit(self):
        sample = generate(DgpSpec(1, 20, 20, 2.0, seed=5))
        cfg = TailConfig(k=40)
        return fit_ftvm(sample.panel, 1, cfg, FAST)

    def test_intermediate_surface(self):
        res = self._fit()
        surface = predict_quantiles(res, "intermediate")
        np.testing.assert_allclose(
            surface, res.model.volatility_surface() * res.tail.u_intermediate
        )

    def test_extreme_scales_by_weissman_factor(self):
        res = self._fit()
        p = 1e-4
        factor = (res.tail.k / (res.tail.n * p)) ** res.tail.gamma_hat
        np.testing.assert_allclose(
            predict_quantiles(res, "extreme", p=p),
            predict_quantiles(res, "intermediate") * factor,
            rtol=1e-12,
        )

    def test_extreme_requires_valid_p(self):
        res = self._fit()
        with pytest.raises(ArgumentError):
            predict_quantiles(res, "extreme", p=0.5)
        with pytest.raises(ArgumentError):
            predict_quantiles(res, "extreme")

    def test_degenerate_surface(self):
        res = self._fit()
        surface = degenerate_quantiles(res.tail, (20, 20))
        assert surface.shape == (20, 20)
        assert np.all(surface == res.tail.u_intermediate)
        extreme = degenerate_quantiles(res.tail, (20, 20), "extreme", p=1e-4)
        assert np.all(extreme > surface)


class TestEstimator:
    def test_fit_predict_flow(self):
        sample = generate(DgpSpec(1, 20, 20, 2.0, seed=9))
        est = FactorizedTailVolatility(r=1, k=40, seed=0, n_restarts=2)
        est.fit(sample.panel.values)
        surface = est.predict_quantiles()
        assert surface.shape == (20, 20)
        assert est.tail_.k == 40
        assert est.n_features_in_ == 20

    def test_unfitted_predict_raises(self):
        with pytest.raises(ArgumentError, match="not fitted"):
            FactorizedTailVolatility().predict_quantiles()

    def test_k_frac_resolution(self):
        sample = generate(DgpSpec(1, 20, 20, 2.0, seed=10))
        est = FactorizedTailVolatility(r=1, k_frac=0.05, seed=0, n_restarts=2)
        est.fit(sample.panel)
        assert est.tail_.k == 20
