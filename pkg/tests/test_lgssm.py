"""Linear-Gaussian model: Kalman oracle, lookahead quadratics, gradients."""

import numpy as np
import pytest
from scipy import stats

from twistsmc import RngStream
from twistsmc.lgssm import (
    LGSSMParams,
    MeanFieldGaussianProposal,
    OptimalSmoothingProposal,
    analytic_quadratic_twist,
    generate_data,
    kalman,
    lgssm_model,
    lgssm_theta_grads,
    load_trace,
    lookahead_coeffs,
    lookahead_log_norm,
    lookahead_weight_rows,
    prior_marginal_vars,
    sample_posterior,
    save_trace,
)
from twistsmc.ssm import check_factorization

from oracles import lgssm_lookahead_direct, lgssm_quadrature


class TestKalman:
    def test_single_step_analytic(self):
        params = LGSSMParams(1.0, 1.0, 1)
        oracle = kalman(params, np.array([0.0]))
        assert oracle.log_z == pytest.approx(-0.5 * np.log(4 * np.pi), abs=1e-12)
        assert oracle.smoothed_means[0] == pytest.approx(0.0, abs=1e-15)
        assert oracle.smoothed_vars[0] == pytest.approx(0.5, abs=1e-12)

    def test_uninformative_observations_recover_prior(self):
        params = LGSSMParams(1.0, 1e8, 6)
        y = np.array([3.0, -1.0, 2.0, 0.5, -2.0, 1.0])
        oracle = kalman(params, y)
        np.testing.assert_allclose(oracle.smoothed_means, 0.0, atol=1e-4)
        np.testing.assert_allclose(
            oracle.smoothed_vars,
            np.arange(1, 7, dtype=float),
            rtol=1e-4,
        )

    def test_log_z_matches_quadrature(self):
        params = LGSSMParams(1.3, 0.7, 3)
        y = np.array([0.4, -1.1, 2.3])
        oracle = kalman(params, y)
        quad = lgssm_quadrature(1.3, 0.7, y)
        assert oracle.log_z == pytest.approx(quad["log_z"], abs=1e-6)

    def test_moments_match_quadrature(self):
        params = LGSSMParams(1.0, 1.0, 3)
        y = np.array([1.0, -0.5, 0.25])
        oracle = kalman(params, y)
        quad = lgssm_quadrature(1.0, 1.0, y)
        np.testing.assert_allclose(oracle.smoothed_means, quad["means"], atol=1e-8)
        np.testing.assert_allclose(oracle.smoothed_vars, quad["variances"], atol=1e-8)

    def test_smoothed_vars_never_exceed_filtered(self):
        params = LGSSMParams(0.8, 1.4, 12)
        _, y = generate_data(params, RngStream(3))
        oracle = kalman(params, y)
        assert np.all(oracle.smoothed_vars <= oracle.filtered_vars + 1e-12)
        assert oracle.smoothed_vars[-1] == pytest.approx(
            oracle.filtered_vars[-1], abs=1e-15
        )


class TestFactorization:
    def test_per_step_terms_match_joint_gaussian(self):
        params = LGSSMParams(1.2, 0.6, 5)
        t_len = params.horizon
        idx = np.arange(1, t_len + 1, dtype=float)
        cov_xx = params.sigma_x_sq * np.minimum.outer(idx, idx)
        cov = np.block(
            [
                [cov_xx, cov_xx],
                [cov_xx, cov_xx + params.sigma_y_sq * np.eye(t_len)],
            ]
        )
        mvn = stats.multivariate_normal(mean=np.zeros(2 * t_len), cov=cov)

        def monolithic(x, y):
            return mvn.logpdf(np.concatenate([x[:, 0], y[:, 0]]))

        check_factorization(lgssm_model(params), monolithic, RngStream(17), n=8)


class TestLookahead:
    def test_two_step_coefficients(self):
        params = LGSSMParams(1.0, 1.0, 2)
        y2 = 1.7
        a, b, c = lookahead_coeffs(params, np.array([0.3, y2]))
        assert a[0] == pytest.approx(-0.25, abs=1e-12)
        assert b[0] == pytest.approx(0.5 * y2, abs=1e-12)
        # log N(y2; x, 2) has constant term -y2^2/4 - log sqrt(4 pi).
        assert c[0] == pytest.approx(-y2**2 / 4 - 0.5 * np.log(4 * np.pi), abs=1e-12)

    def test_quadratic_matches_direct_predictive_factorization(self):
        params = LGSSMParams(0.9, 1.3, 7)
        _, y = generate_data(params, RngStream(8))
        a, b, c = lookahead_coeffs(params, y)
        gen = RngStream(9).generator()
        for t in range(params.horizon - 1):
            for x_val in gen.normal(0.0, 2.0, size=3):
                direct = lgssm_lookahead_direct(0.9, 1.3, y, t, x_val)
                quad = a[t] * x_val**2 + b[t] * x_val + c[t]
                assert quad == pytest.approx(direct, abs=1e-9)

    def test_weight_rows_reproduce_linear_term(self):
        params = LGSSMParams(1.1, 0.4, 6)
        rows = lookahead_weight_rows(params)
        assert np.allclose(np.tril(rows), 0.0)
        _, y = generate_data(params, RngStream(10))
        _, b, _ = lookahead_coeffs(params, y)
        np.testing.assert_allclose(rows @ y, b, atol=1e-12)

    def test_log_norm_consistency(self):
        # p(y_{t+1:}) from the quadratics equals a Kalman run on the suffix
        # started from the prior marginal of x_{t+1}.
        params = LGSSMParams(1.0, 1.0, 5)
        _, y = generate_data(params, RngStream(11))
        norms = lookahead_log_norm(params, y)
        for t in range(params.horizon - 1):
            suffix = y[t + 1 :]
            # Suffix model: first latent has prior variance (t+2) * sx.
            sub = _suffix_log_evidence(params, suffix, (t + 2) * params.sigma_x_sq)
            assert norms[t] == pytest.approx(sub, abs=1e-9)


def _suffix_log_evidence(params, y, first_var):
    mean, var = 0.0, first_var
    total = 0.0
    for obs in y:
        pred = var + params.sigma_y_sq
        total += stats.norm.logpdf(obs, mean, np.sqrt(pred))
        gain = var / pred
        mean += gain * (obs - mean)
        var = (1 - gain) * var + params.sigma_x_sq
    return total


class TestThetaGrads:
    def test_zero_trajectory_observation_grad(self):
        params = LGSSMParams(1.0, 1.0, 6)
        grads = lgssm_theta_grads(params, np.zeros(6), np.zeros(6))
        assert grads["log_sigma_y_sq"] == pytest.approx(-3.0, abs=1e-12)
        assert grads["log_sigma_x_sq"] == pytest.approx(-3.0, abs=1e-12)

    def test_matches_finite_differences(self):
        params = LGSSMParams(1.4, 0.8, 5)
        x, y = generate_data(params, RngStream(12))
        grads = lgssm_theta_grads(params, x, y)
        model = lgssm_model(params)
        h = 1e-6
        for name, key in [
            ("log_sigma_x_sq", "sigma_x_sq"),
            ("log_sigma_y_sq", "sigma_y_sq"),
        ]:
            base = dict(sigma_x_sq=1.4, sigma_y_sq=0.8, horizon=5)
            up, dn = dict(base), dict(base)
            up[key] = base[key] * np.exp(h)
            dn[key] = base[key] * np.exp(-h)
            f_up = lgssm_model(LGSSMParams(**up)).log_joint(
                x[:, None], y[:, None]
            )
            f_dn = lgssm_model(LGSSMParams(**dn)).log_joint(
                x[:, None], y[:, None]
            )
            fd = (f_up - f_dn) / (2 * h)
            assert grads[name] == pytest.approx(fd, rel=1e-6)
        # Per-step hooks agree with the whole-trajectory gradient.
        hook_total = {"log_sigma_x_sq": 0.0, "log_sigma_y_sq": 0.0}
        for t in range(5):
            prev = None if t == 0 else x[t - 1 : t][None]
            hooks = model.theta_grads(t, x[t : t + 1][:, None], prev, y[t : t + 1])
            for name in hook_total:
                hook_total[name] += float(hooks[name][0])
        for name in hook_total:
            assert hook_total[name] == pytest.approx(grads[name], abs=1e-10)

    def test_fisher_identity_numerically(self):
        params = LGSSMParams(1.0, 1.0, 4)
        _, y = generate_data(params, RngStream(13))
        n = 100_000
        xs = sample_posterior(params, y, n, RngStream(14))
        per_sample = -0.5 * 4 + np.sum(
            np.diff(xs, prepend=0.0, axis=1) ** 2, axis=1
        ) / (2 * params.sigma_x_sq)
        est = per_sample.mean()
        se = per_sample.std(ddof=1) / np.sqrt(n)
        h = 1e-4
        up = kalman(LGSSMParams(np.exp(h), 1.0, 4), y).log_z
        dn = kalman(LGSSMParams(np.exp(-h), 1.0, 4), y).log_z
        fd = (up - dn) / (2 * h)
        assert abs(est - fd) < 3 * se + 1e-4


class TestOptimalProposal:
    def test_final_step_conditional(self):
        sx, sy = 1.5, 0.5
        params = LGSSMParams(sx, sy, 3)
        y = np.array([0.0, 0.0, 2.0])
        prop = OptimalSmoothingProposal(params, y)
        x_prev = np.array([[1.0]])
        mean, var = prop._moments(2, x_prev)
        expect_mean = (1.0 * sy + 2.0 * sx) / (sx + sy)
        expect_var = sx * sy / (sx + sy)
        assert mean[0] == pytest.approx(expect_mean, abs=1e-12)
        assert var == pytest.approx(expect_var, abs=1e-12)

    def test_uninformative_limit_reduces_to_transition(self):
        params = LGSSMParams(1.0, 1e10, 4)
        y = np.zeros(4)
        prop = OptimalSmoothingProposal(params, y)
        x_prev = np.array([[0.7]])
        mean, var = prop._moments(2, x_prev)
        assert mean[0] == pytest.approx(0.7, rel=1e-4)
        assert var == pytest.approx(1.0, rel=1e-4)

    def test_sequential_sampling_reproduces_smoothed_moments(self):
        params = LGSSMParams(1.0, 1.0, 5)
        _, y = generate_data(params, RngStream(15))
        prop = OptimalSmoothingProposal(params, y)
        gen = RngStream(16).generator()
        n = 100_000
        x_prev = None
        draws = np.empty((n, 5))
        for t in range(5):
            x_prev = prop.sample(t, x_prev, n, gen)
            draws[:, t] = x_prev[:, 0]
        oracle = kalman(params, y)
        se_mean = draws.std(axis=0, ddof=1) / np.sqrt(n)
        assert np.all(np.abs(draws.mean(axis=0) - oracle.smoothed_means) < 3 * se_mean)
        np.testing.assert_allclose(
            draws.var(axis=0, ddof=1), oracle.smoothed_vars, rtol=0.03
        )


class TestPosteriorSampler:
    def test_moments_match_smoother(self):
        params = LGSSMParams(0.7, 1.1, 6)
        _, y = generate_data(params, RngStream(18))
        xs = sample_posterior(params, y, 100_000, RngStream(19))
        oracle = kalman(params, y)
        se = xs.std(axis=0, ddof=1) / np.sqrt(xs.shape[0])
        assert np.all(np.abs(xs.mean(axis=0) - oracle.smoothed_means) < 3 * se)
        np.testing.assert_allclose(xs.var(axis=0, ddof=1), oracle.smoothed_vars, rtol=0.03)
        # Lag-one cross covariance too, since the proposal construction uses it.
        emp_cross = np.mean(
            (xs[:, :-1] - xs[:, :-1].mean(axis=0)) * (xs[:, 1:] - xs[:, 1:].mean(axis=0)),
            axis=0,
        )
        np.testing.assert_allclose(emp_cross, oracle.cross_covs, atol=0.02)


class TestAnalyticTwist:
    def test_matches_lookahead_up_to_per_step_constant(self):
        params = LGSSMParams(1.0, 1.0, 6)
        _, y = generate_data(params, RngStream(20))
        twist = analytic_quadratic_twist(params)
        gen = RngStream(21).generator()
        xs = gen.normal(0.0, 2.0, size=100)
        a, b, c = lookahead_coeffs(params, y)
        for t in range(params.horizon - 1):
            vals = twist.log_value(t, xs[:, None], y[:, None])
            direct = a[t] * xs**2 + b[t] * xs + c[t]
            resid = vals - direct
            assert np.ptp(resid) < 1e-8  # constant offset only
        # Offset equals -log p(y_{t+1:}) by the ratio identity.
        norms = lookahead_log_norm(params, y)
        t = 2
        vals = twist.log_value(t, xs[:2, None], y[:, None])
        direct = a[t] * xs[:2] ** 2 + b[t] * xs[:2] + c[t]
        assert vals[0] - direct[0] == pytest.approx(-norms[t], abs=1e-9)

    def test_prior_variances(self):
        params = LGSSMParams(2.0, 1.0, 4)
        np.testing.assert_allclose(
            prior_marginal_vars(params), [2.0, 4.0, 6.0, 8.0]
        )


class TestProposalGrads:
    def test_mean_field_grads_match_finite_differences(self):
        prop = MeanFieldGaussianProposal(
            means=np.array([0.3, -0.2, 1.0]), log_vars=np.array([0.1, -0.4, 0.2])
        )
        gen = RngStream(22).generator()
        x = gen.normal(size=(5, 1))
        t = 1
        grads = prop.param_grads(t, x, None)
        h = 1e-6
        for name in ("mean", "log_var"):
            for j in range(3):
                up = {k: v.copy() for k, v in prop.params.items()}
                dn = {k: v.copy() for k, v in prop.params.items()}
                up[name][j] += h
                dn[name][j] -= h
                p_up = MeanFieldGaussianProposal(up["mean"], up["log_var"])
                p_dn = MeanFieldGaussianProposal(dn["mean"], dn["log_var"])
                fd = (p_up.log_prob(t, x, None) - p_dn.log_prob(t, x, None)) / (2 * h)
                np.testing.assert_allclose(grads[name][:, j], fd, atol=1e-6)


class TestTraceFiles:
    def test_round_trip(self, tmp_path):
        params = LGSSMParams(1.0, 2.0, 4)
        x, y = generate_data(params, RngStream(23))
        path = tmp_path / "trace.json"
        save_trace(path, params, y, x)
        loaded_params, loaded_y, loaded_x = load_trace(path)
        assert loaded_params == params
        np.testing.assert_allclose(loaded_y, y, atol=1e-15)
        np.testing.assert_allclose(loaded_x, x, atol=1e-15)

    def test_optional_latents(self, tmp_path):
        params = LGSSMParams(1.0, 2.0, 2)
        path = tmp_path / "trace.json"
        save_trace(path, params, np.array([0.5, 1.5]))
        _, _, loaded_x = load_trace(path)
        assert loaded_x is None
