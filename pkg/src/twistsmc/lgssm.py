"""One-dimensional linear Gaussian state-space model with exact oracles.

The model is a Gaussian random walk observed in Gaussian noise:

    x_0 ~ N(0, sx),   x_t | x_{t-1} ~ N(x_{t-1}, sx),
    y_t | x_t ~ N(x_t, sy),

with dynamics variance ``sx`` and observation variance ``sy``. Everything
about it is available in closed form: the Kalman filter/RTS smoother give
the exact marginal likelihood and posterior moments, a backward recursion
gives the lookahead densities ``p(y_{t+1:} | x_t)`` as explicit quadratics
in ``x_t``, and from those the per-step optimal smoothing proposals
``p(x_t | x_{t-1}, y_{t:})`` follow by conjugacy. This makes the model the
workhorse fixture for validating samplers, twists and gradient estimators
against ground truth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .rng import RngStream
from .ssm import ModelSpec

_LOG2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class LGSSMParams:
    """Model parameters: dynamics variance, observation variance, horizon."""

    sigma_x_sq: float
    sigma_y_sq: float
    horizon: int

    def __post_init__(self):
        if self.sigma_x_sq <= 0 or self.sigma_y_sq <= 0:
            raise ValueError("variances must be positive")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass(frozen=True)
class OracleResult:
    """Exact quantities from the Kalman filter and RTS smoother.

    Attributes:
        log_z: exact log marginal likelihood of the observations.
        filtered_means / filtered_vars: moments of p(x_t | y_{0:t}).
        smoothed_means / smoothed_vars: moments of p(x_t | y_{0:T-1}).
        cross_covs: Cov(x_t, x_{t+1} | y_{0:T-1}), shape ``(T-1,)``.
    """

    log_z: float
    filtered_means: np.ndarray
    filtered_vars: np.ndarray
    smoothed_means: np.ndarray
    smoothed_vars: np.ndarray
    cross_covs: np.ndarray


def _gauss_logpdf(x, mean, var):
    return -0.5 * (_LOG2PI + np.log(var)) - 0.5 * (x - mean) ** 2 / var


def kalman(params: LGSSMParams, y: np.ndarray) -> OracleResult:
    """Exact forward filter and RTS backward smoother.

    Args:
        params: model parameters.
        y: observations, shape ``(T,)`` or ``(T, 1)``.

    Returns:
        Marginal likelihood and filtered/smoothed moments.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    t_len = params.horizon
    if y.shape[0] != t_len:
        raise ValueError("observation length does not match horizon")
    sx, sy = params.sigma_x_sq, params.sigma_y_sq

    m_f = np.empty(t_len)
    p_f = np.empty(t_len)
    m_pred = np.empty(t_len)
    p_pred = np.empty(t_len)
    log_z = 0.0
    m, p = 0.0, sx
    for t in range(t_len):
        m_pred[t], p_pred[t] = m, p
        log_z += _gauss_logpdf(y[t], m, p + sy)
        gain = p / (p + sy)
        m = m + gain * (y[t] - m)
        p = (1.0 - gain) * p
        m_f[t], p_f[t] = m, p
        m, p = m, p + sx

    m_s = np.empty(t_len)
    p_s = np.empty(t_len)
    cross = np.empty(max(t_len - 1, 0))
    m_s[-1], p_s[-1] = m_f[-1], p_f[-1]
    for t in range(t_len - 2, -1, -1):
        gain = p_f[t] / p_pred[t + 1]
        m_s[t] = m_f[t] + gain * (m_s[t + 1] - m_pred[t + 1])
        p_s[t] = p_f[t] + gain**2 * (p_s[t + 1] - p_pred[t + 1])
        cross[t] = gain * p_s[t + 1]

    return OracleResult(
        log_z=float(log_z),
        filtered_means=m_f,
        filtered_vars=p_f,
        smoothed_means=m_s,
        smoothed_vars=p_s,
        cross_covs=cross,
    )


def lookahead_coeffs(
    params: LGSSMParams, y: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Quadratic coefficients of the lookahead log-densities.

    Because the model is jointly Gaussian, ``log p(y_{t+1:} | x_t)`` is an
    exact quadratic ``A[t] x^2 + B[t] x + C[t]``. Coefficients satisfy a
    backward recursion obtained by integrating the next state out of
    ``p(x_{t+1} | x_t) p(y_{t+1} | x_{t+1}) exp(quadratic at t+1)``.

    Returns:
        Arrays ``(A, B, C)`` of shape ``(T,)``; the final entries are zero
        (an empty lookahead).
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    t_len = params.horizon
    sx, sy = params.sigma_x_sq, params.sigma_y_sq
    a = np.zeros(t_len)
    b = np.zeros(t_len)
    c = np.zeros(t_len)
    for t in range(t_len - 2, -1, -1):
        prec = 1.0 / sx + 1.0 / sy - 2.0 * a[t + 1]
        lin = y[t + 1] / sy + b[t + 1]
        a[t] = 1.0 / (2.0 * prec * sx**2) - 1.0 / (2.0 * sx)
        b[t] = lin / (prec * sx)
        c[t] = (
            lin**2 / (2.0 * prec)
            - y[t + 1] ** 2 / (2.0 * sy)
            + c[t + 1]
            + 0.5 * np.log(2.0 * np.pi / prec)
            - 0.5 * np.log(2.0 * np.pi * sx)
            - 0.5 * np.log(2.0 * np.pi * sy)
        )
    return a, b, c


def lookahead_weight_rows(params: LGSSMParams) -> np.ndarray:
    """Linear maps behind the lookahead coefficients ``B``.

    ``B[t] = L[t] @ y`` for every observation vector; obtained by running
    the coefficient recursion on observation basis vectors. Row ``t`` is
    supported on indices ``> t``.
    """
    t_len = params.horizon
    sx, sy = params.sigma_x_sq, params.sigma_y_sq
    rows = np.zeros((t_len, t_len))
    a = np.zeros(t_len)
    b_vec = np.zeros((t_len, t_len))
    for t in range(t_len - 2, -1, -1):
        prec = 1.0 / sx + 1.0 / sy - 2.0 * a[t + 1]
        lin = b_vec[t + 1].copy()
        lin[t + 1] += 1.0 / sy
        a[t] = 1.0 / (2.0 * prec * sx**2) - 1.0 / (2.0 * sx)
        b_vec[t] = lin / (prec * sx)
        rows[t] = b_vec[t]
    return rows


def prior_marginal_vars(params: LGSSMParams) -> np.ndarray:
    """Variance of the latent prior marginal p(x_t): ``(t+1) * sigma_x_sq``."""
    return params.sigma_x_sq * np.arange(1, params.horizon + 1, dtype=float)


def lookahead_log_norm(params: LGSSMParams, y: np.ndarray) -> np.ndarray:
    """log p(y_{t+1:}) for each t, from the lookahead quadratics.

    Integrates ``exp(A x^2 + B x + C)`` against the prior marginal of
    ``x_t``; entry ``T-1`` is 0 (empty product).
    """
    a, b, c = lookahead_coeffs(params, y)
    s2 = prior_marginal_vars(params)
    out = np.zeros(params.horizon)
    for t in range(params.horizon - 1):
        prec = 1.0 / s2[t] - 2.0 * a[t]
        s1 = 1.0 / prec
        out[t] = c[t] + b[t] ** 2 * s1 / 2.0 + 0.5 * np.log(s1 / s2[t])
    return out


class ExactLookaheadTwist:
    """The exactly-normalized optimal twist ``log r = log p(y_{t+1:} | x_t)``.

    With this twist and the optimal proposal, every incremental weight in a
    twisted sweep collapses to a constant (``p(y)`` at the first step, 1
    afterwards), which is the fixture behind the unbiasedness checks.
    """

    def __init__(self, params: LGSSMParams, y: np.ndarray):
        self.a, self.b, self.c = lookahead_coeffs(params, y)
        self.horizon = params.horizon

    def log_value(self, t: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if t >= self.horizon - 1:
            return np.zeros(x.shape[0])
        xv = np.asarray(x, dtype=float).reshape(-1)
        return self.a[t] * xv**2 + self.b[t] * xv + self.c[t]


def lgssm_model(params: LGSSMParams) -> ModelSpec:
    """Bundle the model as a :class:`ModelSpec` with gradient hooks.

    The gradient hooks expose the two variances in log space (names
    ``log_sigma_x_sq`` and ``log_sigma_y_sq``) so that optimization is
    unconstrained.
    """
    sx, sy = params.sigma_x_sq, params.sigma_y_sq

    def log_init(x):
        return _gauss_logpdf(x[..., 0], 0.0, sx)

    def log_trans(t, x, x_prev):
        return _gauss_logpdf(x[..., 0], x_prev[..., 0], sx)

    def log_obs(t, y_t, x):
        y_val = np.asarray(y_t, dtype=float)
        if y_val.ndim > 0:
            y_val = y_val[..., 0]
        return _gauss_logpdf(y_val, x[..., 0], sy)

    def sample_init(n, gen):
        return gen.normal(0.0, np.sqrt(sx), size=(n, 1))

    def sample_trans(t, x_prev, gen):
        return x_prev + gen.normal(0.0, np.sqrt(sx), size=x_prev.shape)

    def sample_obs(t, x, gen):
        return x + gen.normal(0.0, np.sqrt(sy), size=x.shape)

    def theta_grads(t, x, x_prev, y_t):
        xv = x[..., 0]
        prev = np.zeros_like(xv) if x_prev is None else x_prev[..., 0]
        y_val = np.asarray(y_t)[..., 0]
        d_lsx = -0.5 + (xv - prev) ** 2 / (2.0 * sx)
        d_lsy = -0.5 + (y_val - xv) ** 2 / (2.0 * sy)
        return {"log_sigma_x_sq": d_lsx, "log_sigma_y_sq": d_lsy}

    return ModelSpec(
        dim_x=1,
        dim_y=1,
        horizon=params.horizon,
        log_init=log_init,
        log_trans=log_trans,
        log_obs=log_obs,
        sample_init=sample_init,
        sample_trans=sample_trans,
        sample_obs=sample_obs,
        theta_grads=theta_grads,
    )


def lgssm_theta_grads(
    params: LGSSMParams, x: np.ndarray, y: np.ndarray
) -> dict[str, float]:
    """Gradient of the whole-trajectory log joint w.r.t. the log variances."""
    x = np.asarray(x, dtype=float).reshape(-1)
    y = np.asarray(y, dtype=float).reshape(-1)
    sx, sy = params.sigma_x_sq, params.sigma_y_sq
    diffs = np.diff(x, prepend=0.0)
    d_lsx = np.sum(-0.5 + diffs**2 / (2.0 * sx))
    d_lsy = np.sum(-0.5 + (y - x) ** 2 / (2.0 * sy))
    return {"log_sigma_x_sq": float(d_lsx), "log_sigma_y_sq": float(d_lsy)}


class MeanFieldGaussianProposal:
    """Independent Gaussian proposal per timestep: 2T learnable parameters."""

    def __init__(self, means: np.ndarray, log_vars: np.ndarray):
        means = np.asarray(means, dtype=float)
        log_vars = np.asarray(log_vars, dtype=float)
        if means.shape != log_vars.shape:
            raise ValueError("means and log_vars must have equal shape")
        self.params = {"mean": means.copy(), "log_var": log_vars.copy()}

    @property
    def horizon(self) -> int:
        return self.params["mean"].shape[0]

    def sample(self, t, x_prev, n, gen):
        mu = self.params["mean"][t]
        sd = np.exp(0.5 * self.params["log_var"][t])
        return mu + sd * gen.standard_normal((n, 1))

    def log_prob(self, t, x, x_prev):
        mu = self.params["mean"][t]
        var = np.exp(self.params["log_var"][t])
        return _gauss_logpdf(x[..., 0], mu, var)

    def param_grads(self, t, x, x_prev):
        n = x.shape[0]
        mu = self.params["mean"][t]
        var = np.exp(self.params["log_var"][t])
        resid = x[..., 0] - mu
        d_mean = np.zeros((n, self.horizon))
        d_logv = np.zeros((n, self.horizon))
        d_mean[:, t] = resid / var
        d_logv[:, t] = -0.5 + resid**2 / (2.0 * var)
        return {"mean": d_mean, "log_var": d_logv}


class OptimalSmoothingProposal:
    """The exact per-step conditionals ``p(x_t | x_{t-1}, y_{t:})``.

    Built from the lookahead quadratics: the conditional at step t is the
    Gaussian proportional to transition * observation * lookahead, all of
    which are conjugate. Used as the unbiasedness fixture and as a
    variance-free reference proposal.
    """

    def __init__(self, params: LGSSMParams, y: np.ndarray):
        y = np.asarray(y, dtype=float).reshape(-1)
        a, b, _ = lookahead_coeffs(params, y)
        sx, sy = params.sigma_x_sq, params.sigma_y_sq
        self.prec = 1.0 / sx + 1.0 / sy - 2.0 * a
        self.lin_const = y / sy + b
        self.sigma_x_sq = sx
        self.params: dict[str, np.ndarray] = {}

    def _moments(self, t, x_prev):
        lin = self.lin_const[t]
        if t > 0:
            lin = lin + x_prev[..., 0] / self.sigma_x_sq
        return lin / self.prec[t], 1.0 / self.prec[t]

    def sample(self, t, x_prev, n, gen):
        mean, var = self._moments(t, x_prev)
        return (mean + np.sqrt(var) * gen.standard_normal(n))[:, None]

    def log_prob(self, t, x, x_prev):
        mean, var = self._moments(t, x_prev)
        return _gauss_logpdf(x[..., 0], mean, var)

    def param_grads(self, t, x, x_prev):
        return {}


def analytic_quadratic_twist(params: LGSSMParams):
    """The population-optimal quadratic twist for this model.

    Conditional variances come from the lookahead curvature
    (``1/s1 = 1/s2 - 2 A``), prior-marginal variances are ``(t+1) sx``,
    and the mean map rows are the lookahead linear maps rescaled by the
    conditional variance. Its logits equal the exact log density ratio, so
    it is both a usable twist and the reference for learned coefficients.
    """
    from .twist import QuadraticTwist

    t_len = params.horizon
    rows = lookahead_weight_rows(params)
    s2 = prior_marginal_vars(params)
    # The curvature coefficients are observation-independent.
    a, _, _ = lookahead_coeffs(params, np.zeros(t_len))
    s1 = np.where(np.arange(t_len) < t_len - 1, 1.0 / (1.0 / s2 - 2.0 * a), s2)
    weights = rows * s1[:, None]
    return QuadraticTwist(
        {
            "log_sigma1_sq": np.log(s1),
            "log_sigma2_sq": np.log(s2),
            "weights": weights,
            "bias": np.zeros(t_len),
        }
    )


def sample_posterior(
    params: LGSSMParams, y: np.ndarray, n: int, rng: RngStream
) -> np.ndarray:
    """Exact joint posterior samples via forward filtering, backward sampling.

    Returns:
        Array of shape ``(n, T)``.
    """
    oracle = kalman(params, y)
    t_len = params.horizon
    sx = params.sigma_x_sq
    gen = rng.generator()
    out = np.empty((n, t_len))
    out[:, -1] = oracle.filtered_means[-1] + np.sqrt(
        oracle.filtered_vars[-1]
    ) * gen.standard_normal(n)
    for t in range(t_len - 2, -1, -1):
        p_pred = oracle.filtered_vars[t] + sx
        gain = oracle.filtered_vars[t] / p_pred
        mean = oracle.filtered_means[t] + gain * (
            out[:, t + 1] - oracle.filtered_means[t]
        )
        var = oracle.filtered_vars[t] - gain**2 * p_pred
        out[:, t] = mean + np.sqrt(var) * gen.standard_normal(n)
    return out


def generate_data(params: LGSSMParams, rng: RngStream) -> tuple[np.ndarray, np.ndarray]:
    """One joint draw ``(x, y)`` from the model, each of shape ``(T,)``."""
    x, y = lgssm_model(params).sample_joint(1, rng)
    return x[0, :, 0], y[0, :, 0]


def save_trace(path: str | Path, params: LGSSMParams, y: np.ndarray,
               x: np.ndarray | None = None) -> None:
    """Write a reproducible fixture file: parameters, data, optional latents."""
    payload = {
        "params": {
            "sigma_x_sq": params.sigma_x_sq,
            "sigma_y_sq": params.sigma_y_sq,
            "horizon": params.horizon,
        },
        "y": np.asarray(y, dtype=float).reshape(-1).tolist(),
    }
    if x is not None:
        payload["x"] = np.asarray(x, dtype=float).reshape(-1).tolist()
    Path(path).write_text(json.dumps(payload, indent=2))


def load_trace(path: str | Path) -> tuple[LGSSMParams, np.ndarray, np.ndarray | None]:
    """Read a fixture written by :func:`save_trace`."""
    payload = json.loads(Path(path).read_text())
    params = LGSSMParams(
        sigma_x_sq=payload["params"]["sigma_x_sq"],
        sigma_y_sq=payload["params"]["sigma_y_sq"],
        horizon=payload["params"]["horizon"],
    )
    y = np.asarray(payload["y"], dtype=float)
    x = np.asarray(payload["x"], dtype=float) if "x" in payload else None
    return params, y, x
