import numpy as np
import pytest

from genmarket.bw_geometry import GaussianMeasure
from genmarket.errors import ConfigError, DimensionError, DomainError, NearSingularError
from genmarket.gdn_model import gdn_from_measure, init_gdn_params, gdn_forward
from genmarket.market_map import ClipConfig
from genmarket.ou_dynamics import OUCoefficients, exact_marginal
from genmarket.pricing_portfolio import (
    PayoffSpec,
    PortfolioInput,
    efficient_portfolio,
    portfolio_from_model,
    price_claim,
)

from oracles import black_scholes_call, lognormal_call_tail, qp_portfolio


def random_spd(rng, d, eig_range=(0.2, 3.0)):
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    s = (q * rng.uniform(*eig_range, d)) @ q.T
    return 0.5 * (s + s.T)


class TestPayoffSpec:
    def test_call_defaults(self):
        p = PayoffSpec("call_on_avg", dimension=4, strike=1.0)
        np.testing.assert_allclose(p.lip_const, 0.5)  # 1/sqrt(4)
        vals = p(np.array([[2.0, 2.0, 2.0, 2.0], [0.5, 0.5, 0.5, 0.5]]))
        np.testing.assert_allclose(vals, [1.0, 0.0])

    def test_basket_linear_and_constant(self):
        p = PayoffSpec("basket_linear", dimension=2, weights=(0.0, 0.0), offset=3.7)
        assert p.is_constant and p.lip_const == 0.0
        np.testing.assert_array_equal(p(np.ones((3, 2))), [3.7, 3.7, 3.7])
        q = PayoffSpec("basket_linear", dimension=2, weights=(3.0, 4.0), offset=0.0)
        np.testing.assert_allclose(q.lip_const, 5.0)

    def test_declared_constant_below_actual_rejected(self):
        with pytest.raises(ConfigError):
            PayoffSpec("basket_linear", dimension=2, weights=(3.0, 4.0), lip_const=4.0)

    def test_custom_table_slope_validation(self):
        tables = ({"knots": [0.0, 1.0, 2.0], "values": [0.0, 2.0, 2.5]},)
        p = PayoffSpec("custom_table", dimension=1, tables=tables)
        np.testing.assert_allclose(p.lip_const, 2.0)
        with pytest.raises(ConfigError):
            PayoffSpec("custom_table", dimension=1, tables=tables, lip_const=1.0)
        np.testing.assert_allclose(p(np.array([[0.5]])), [1.0])

    def test_sup_abs_on_clipped_cube(self):
        m = 1.0
        call = PayoffSpec("call_on_avg", dimension=1, strike=1.0)
        np.testing.assert_allclose(call.sup_abs(m), np.exp(1.0) - 1.0)
        put = PayoffSpec("put_on_avg", dimension=1, strike=1.0)
        np.testing.assert_allclose(put.sup_abs(m), 1.0 - np.exp(-1.0))
        lin = PayoffSpec("basket_linear", dimension=2, weights=(1.0, -1.0), offset=0.0)
        np.testing.assert_allclose(lin.sup_abs(m), np.exp(1.0) - np.exp(-1.0))

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            PayoffSpec("asian_lookback", dimension=1)


class TestPriceClaim:
    def test_constant_payoff_exact_price_zero_bound(self):
        payoff = PayoffSpec("basket_linear", dimension=2, weights=(0.0, 0.0), offset=3.7)
        params = init_gdn_params(2, depth=2, width=4, seed=0)
        cfg = ClipConfig(2.0, 2)
        result = price_claim(params, [0.0, 0.0], 0.5, payoff, n=5000, seed=1, cfg=cfg)
        assert result.price == 3.7
        assert result.standard_error == 0.0
        assert result.certified_bias_bound == 0.0

    def test_missing_epsilon_rejected(self):
        payoff = PayoffSpec("call_on_avg", dimension=2, strike=1.0)
        params = init_gdn_params(2, depth=2, width=4, seed=0)
        with pytest.raises(DomainError, match="evaluation report"):
            price_claim(params, [0.0, 0.0], 0.5, payoff, n=5000, seed=1,
                        cfg=ClipConfig(2.0, 2))

    def test_sample_floor(self):
        payoff = PayoffSpec("call_on_avg", dimension=2, strike=1.0)
        params = init_gdn_params(2, depth=2, width=4, seed=0)
        with pytest.raises(DomainError):
            price_claim(params, [0.0, 0.0], 0.5, payoff, n=100, seed=1,
                        cfg=ClipConfig(2.0, 2), epsilon=0.1)

    def test_gbm_limit_matches_black_scholes(self):
        # drift -sigma^2/2, no reversion: prices are lognormal martingales and
        # the clipped call price matches the closed form up to Monte Carlo
        # error plus an explicit clipping correction
        sigma0, t, x0, strike, clip_m = 0.2, 1.0, 0.0, 1.0, 6.0
        coeffs = OUCoefficients.constant(
            [-0.5 * sigma0**2], [[0.0]], [[sigma0]]
        )
        law = exact_marginal(coeffs, [x0], t).law
        params = gdn_from_measure(law)
        payoff = PayoffSpec("call_on_avg", dimension=1, strike=strike)
        n = 200_000
        result = price_claim(params, [x0], t, payoff, n=n, seed=11,
                             cfg=ClipConfig(clip_m, 1), epsilon=0.0)
        oracle = black_scholes_call(np.exp(x0), strike, sigma0, t)
        clip_correction = lognormal_call_tail(
            law.mean[0], np.sqrt(law.cov[0, 0]), clip_m
        )
        assert clip_correction < 1e-3
        assert abs(result.price - oracle) <= 3.0 * result.standard_error + clip_correction

    def test_standard_error_scales_with_n(self):
        payoff = PayoffSpec("call_on_avg", dimension=1, strike=1.0)
        g = GaussianMeasure([0.0], [[0.04]])
        params = gdn_from_measure(g)
        cfg = ClipConfig(6.0, 1)
        ratios = []
        for rep in range(30):
            a = price_claim(params, [0.0], 0.5, payoff, 2000, seed=100 + rep, cfg=cfg,
                            epsilon=0.0)
            b = price_claim(params, [0.0], 0.5, payoff, 4000, seed=200 + rep, cfg=cfg,
                            epsilon=0.0)
            ratios.append(b.standard_error / a.standard_error)
        mean_ratio = np.mean(ratios)
        assert abs(mean_ratio - 1.0 / np.sqrt(2.0)) <= 0.2 * (1.0 / np.sqrt(2.0))

    def test_bias_bound_formula(self):
        payoff = PayoffSpec("call_on_avg", dimension=2, strike=1.0)
        g = GaussianMeasure([0.0, 0.0], 0.01 * np.eye(2))
        params = gdn_from_measure(g)
        m = 2.0
        eps = 0.03
        result = price_claim(params, [0.0, 0.0], 0.5, payoff, 2000, seed=5,
                             cfg=ClipConfig(m, 2), epsilon=eps)
        expected = (payoff.sup_abs(m) + payoff.lip_const) * np.sqrt(2.0) * np.exp(m) * eps
        np.testing.assert_allclose(result.certified_bias_bound, expected, rtol=1e-12)


class TestEfficientPortfolio:
    def test_identity_covariance_equal_weights(self):
        w = efficient_portfolio(PortfolioInput(0.0, np.array([0.3, -0.1, 0.2]), np.eye(3)))
        np.testing.assert_allclose(w, np.full(3, 1.0 / 3.0), atol=1e-14)

    def test_diagonal_example(self):
        w = efficient_portfolio(PortfolioInput(0.0, np.zeros(2), np.diag([1.0, 4.0])))
        np.testing.assert_allclose(w, [0.8, 0.2], atol=1e-14)

    def test_budget_constraint_exact(self):
        rng = np.random.default_rng(20)
        for _ in range(50):
            d = int(rng.integers(2, 11))
            inp = PortfolioInput(
                float(rng.uniform(0, 2)), rng.standard_normal(d), random_spd(rng, d)
            )
            w = efficient_portfolio(inp)
            assert abs(w.sum() - 1.0) <= 1e-12

    def test_gamma_zero_ignores_mu(self):
        rng = np.random.default_rng(21)
        sigma = random_spd(rng, 4)
        w1 = efficient_portfolio(PortfolioInput(0.0, rng.standard_normal(4), sigma))
        w2 = efficient_portfolio(PortfolioInput(0.0, rng.standard_normal(4), sigma))
        np.testing.assert_allclose(w1, w2, atol=1e-14)

    def test_matches_projected_gradient_oracle(self):
        rng = np.random.default_rng(22)
        for _ in range(20):
            d = int(rng.integers(2, 8))
            mu = rng.standard_normal(d)
            sigma = random_spd(rng, d, eig_range=(0.3, 2.5))
            for gamma in (0.0, 0.5, 2.0):
                w = efficient_portfolio(PortfolioInput(gamma, mu, sigma))
                w_qp = qp_portfolio(gamma, mu, sigma)
                assert np.abs(w - w_qp).max() <= 1e-6

    def test_first_order_conditions(self):
        # at the optimum the gradient Sigma w - gamma mu must be parallel to
        # the all-ones vector (KKT for the budget constraint)
        rng = np.random.default_rng(23)
        for _ in range(25):
            d = int(rng.integers(2, 9))
            mu = rng.standard_normal(d)
            sigma = random_spd(rng, d)
            gamma = float(rng.uniform(0, 2))
            w = efficient_portfolio(PortfolioInput(gamma, mu, sigma))
            grad = sigma @ w - gamma * mu
            residual = grad - grad.mean() * np.ones(d)
            assert np.abs(residual).max() < 1e-10

    def test_near_singular_names_eigenvalue(self):
        sigma = np.array([[1.0, 1.0], [1.0, 1.0]])
        with pytest.raises(NearSingularError, match="eigenvalue"):
            efficient_portfolio(PortfolioInput(0.0, np.zeros(2), sigma))

    def test_negative_gamma_rejected(self):
        with pytest.raises(DomainError):
            PortfolioInput(-0.5, np.zeros(2), np.eye(2))

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            PortfolioInput(0.0, np.zeros(3), np.eye(2))


class TestPortfolioFromModel:
    def test_standard_normal_model_equal_weights(self):
        d = 2
        out_dim = d + d * (d + 1) // 2
        params = __import__("genmarket").GDNParams(
            (1 + d, out_dim),
            (np.zeros((out_dim, 1 + d)),),
            (np.zeros(out_dim),),
        )
        w = portfolio_from_model(params, [0.4, -0.4], 0.5, gamma=0.0)
        np.testing.assert_allclose(w, [0.5, 0.5], atol=1e-14)

    def test_composition_matches_direct_call(self):
        g = GaussianMeasure([0.2, -0.1], [[0.5, 0.1], [0.1, 0.3]])
        params = gdn_from_measure(g)
        w_model = portfolio_from_model(params, [0.0, 0.0], 0.5, gamma=0.7)
        w_direct = efficient_portfolio(PortfolioInput(0.7, g.mean, g.cov))
        np.testing.assert_allclose(w_model, w_direct, atol=1e-12)
        assert abs(w_model.sum() - 1.0) <= 1e-12

    def test_model_weights_track_learned_moments(self):
        params = init_gdn_params(2, depth=2, width=8, seed=33)
        g = gdn_forward(params, [0.1, 0.2], 0.4)
        w = portfolio_from_model(params, [0.1, 0.2], 0.4, gamma=1.0)
        np.testing.assert_allclose(
            w, efficient_portfolio(PortfolioInput(1.0, g.mean, g.cov)), atol=1e-12
        )
