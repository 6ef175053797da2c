"""Switching linear dynamical system at desk scale.

A discrete regime indicator selects among per-state linear-Gaussian
dynamics for a 2-D continuous state observed through a fixed linear map:

    z_1 ~ Uniform(K),                x_1 ~ N(0, Q_{z_1}),
    z_{t+1} | x_t ~ Categorical(softmax(r + R x_t)),
    x_{t+1} = A_{z_{t+1}} x_t + b_{z_{t+1}} + noise(Q_{z_{t+1}}),
    y_t = C x_t + d + noise(S).

The switch logits depend on the previous continuous state (through R) but
not on the previous discrete state. With the recurrent weights R at zero
the discrete path prior factorizes, and conditioned on a discrete path
the model is linear-Gaussian, so small (K, T) admit an exact oracle by
enumerating all K^T paths and running a Kalman filter/smoother on each.
The recurrent case breaks that conjugacy and has no tractable oracle.

For the generic SMC/estimator machinery the latent is packed into a flat
vector ``[z, x1, x2]`` with the discrete index stored as a float.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.special import logsumexp

from .rng import RngStream
from .ssm import ModelSpec

_LOG2PI = np.log(2.0 * np.pi)

ENUMERATION_BUDGET = 2**16


@dataclass(frozen=True)
class SLDSParams:
    """Per-state dynamics, recurrent switching weights, linear emission."""

    dyn_mats: np.ndarray  # (K, 2, 2)
    dyn_biases: np.ndarray  # (K, 2)
    dyn_covs: np.ndarray  # (K, 2, 2)
    switch_weights: np.ndarray  # (K, 2)
    switch_biases: np.ndarray  # (K,)
    emission_mat: np.ndarray  # (D, 2)
    emission_bias: np.ndarray  # (D,)
    emission_cov: np.ndarray  # (D, D)

    @property
    def num_states(self) -> int:
        return self.dyn_mats.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.emission_mat.shape[0]

    @property
    def recurrent(self) -> bool:
        return bool(np.any(self.switch_weights != 0.0))

    def __post_init__(self):
        for name in ("dyn_covs",):
            for mat in getattr(self, name):
                if np.any(np.linalg.eigvalsh(mat) <= 0):
                    raise ValueError(f"{name} must be positive definite")
        if np.any(np.linalg.eigvalsh(self.emission_cov) <= 0):
            raise ValueError("emission_cov must be positive definite")


def make_slds_params(
    num_states: int = 2,
    obs_dim: int = 10,
    recurrent: bool = False,
    seed: int = 0,
) -> SLDSParams:
    """A stable rotation-style test model (spectral radii < 1)."""
    gen = RngStream(seed, 777).generator()
    mats = []
    for k in range(num_states):
        angle = 0.08 + 0.07 * k
        rot = np.array(
            [[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]
        )
        mats.append(0.95 * rot)
    biases = 0.25 * gen.standard_normal((num_states, 2))
    covs = np.stack([0.1 * np.eye(2)] * num_states)
    weights = (
        0.5 * gen.standard_normal((num_states, 2))
        if recurrent
        else np.zeros((num_states, 2))
    )
    switch_biases = 0.3 * gen.standard_normal(num_states)
    emission = gen.standard_normal((obs_dim, 2)) / np.sqrt(2.0)
    return SLDSParams(
        dyn_mats=np.asarray(mats),
        dyn_biases=biases,
        dyn_covs=covs,
        switch_weights=weights,
        switch_biases=switch_biases,
        emission_mat=emission,
        emission_bias=np.zeros(obs_dim),
        emission_cov=0.5 * np.eye(obs_dim),
    )


def _chol_logdet(cov):
    chol = np.linalg.cholesky(cov)
    logdet = 2.0 * np.sum(np.log(np.diag(chol)))
    return chol, logdet


def _mvn_logpdf(resid, inv_cov, logdet):
    quad = np.einsum("...i,ij,...j->...", resid, inv_cov, resid)
    d = resid.shape[-1]
    return -0.5 * (d * _LOG2PI + logdet + quad)


def _switch_logits(params: SLDSParams, x_prev_cont: np.ndarray) -> np.ndarray:
    """Logits for the next discrete state, shape ``(N, K)``."""
    return params.switch_biases + x_prev_cont @ params.switch_weights.T


def slds_sample(
    params: SLDSParams, horizon: int, rng: RngStream | np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Ancestral draw; returns ``(z, x, y)`` with z int ``(T,)``,
    x ``(T, 2)``, y ``(T, D)``."""
    model = slds_model(params, horizon)
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    lat, y = model.sample_joint(1, gen)
    return lat[0, :, 0].astype(int), lat[0, :, 1:], y[0]


def slds_logjoint(
    params: SLDSParams, z: np.ndarray, x: np.ndarray, y: np.ndarray
) -> float:
    """Whole-trajectory log joint, summing the per-step factors."""
    model = slds_model(params, len(z))
    lat = np.concatenate([np.asarray(z, dtype=float)[:, None], x], axis=1)
    return float(model.log_joint(lat, np.asarray(y, dtype=float)))


def slds_model(params: SLDSParams, horizon: int) -> ModelSpec:
    """Wrap the model as a :class:`ModelSpec` over packed latents.

    Gradient hooks cover the per-state dynamics biases (``dyn_biases``)
    and switching biases (``switch_biases``); the remaining parameters are
    treated as fixed structure.
    """
    k_states = params.num_states
    obs_dim = params.obs_dim
    chol_q = np.linalg.cholesky(params.dyn_covs)
    inv_q = np.linalg.inv(params.dyn_covs)
    logdet_q = np.array([_chol_logdet(q)[1] for q in params.dyn_covs])
    chol_s, logdet_s = _chol_logdet(params.emission_cov)
    inv_s = np.linalg.inv(params.emission_cov)

    def split(lat):
        return lat[..., 0].astype(int), lat[..., 1:]

    def trans_mean(z, x_prev_cont):
        return (
            np.einsum("nij,nj->ni", params.dyn_mats[z], x_prev_cont)
            + params.dyn_biases[z]
        )

    def gauss_state_logpdf(z, resid):
        quad = np.einsum("ni,nij,nj->n", resid, inv_q[z], resid)
        return -0.5 * (2 * _LOG2PI + logdet_q[z] + quad)

    def log_init(lat):
        z, x_c = split(lat)
        return -np.log(k_states) + gauss_state_logpdf(z, x_c)

    def log_trans(t, lat, lat_prev):
        z, x_c = split(lat)
        z_prev, x_prev = split(lat_prev)
        logits = _switch_logits(params, x_prev)
        log_pz = logits - logsumexp(logits, axis=-1, keepdims=True)
        resid = x_c - trans_mean(z, x_prev)
        return log_pz[np.arange(z.shape[0]), z] + gauss_state_logpdf(z, resid)

    def log_obs(t, y_t, lat):
        _, x_c = split(lat)
        resid = np.asarray(y_t, dtype=float) - (
            x_c @ params.emission_mat.T + params.emission_bias
        )
        return _mvn_logpdf(resid, inv_s, logdet_s)

    def sample_init(n, gen):
        z = gen.integers(0, k_states, size=n)
        eps = gen.standard_normal((n, 2))
        x_c = np.einsum("nij,nj->ni", chol_q[z], eps)
        return np.concatenate([z[:, None].astype(float), x_c], axis=1)

    def sample_trans(t, lat_prev, gen):
        _, x_prev = split(lat_prev)
        logits = _switch_logits(params, x_prev)
        probs = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        u = gen.random((lat_prev.shape[0], 1))
        z = (u > np.cumsum(probs, axis=-1)).sum(axis=-1)
        eps = gen.standard_normal((lat_prev.shape[0], 2))
        x_c = trans_mean(z, x_prev) + np.einsum("nij,nj->ni", chol_q[z], eps)
        return np.concatenate([z[:, None].astype(float), x_c], axis=1)

    def sample_obs(t, lat, gen):
        _, x_c = split(lat)
        mean = x_c @ params.emission_mat.T + params.emission_bias
        eps = gen.standard_normal((lat.shape[0], obs_dim))
        return mean + eps @ chol_s.T

    def theta_grads(t, lat, lat_prev, y_t):
        z, x_c = split(lat)
        n = lat.shape[0]
        d_bias = np.zeros((n, k_states, 2))
        d_switch = np.zeros((n, k_states))
        if lat_prev is None:
            # Uniform initial state and zero-mean initial dynamics: no
            # dependence on either parameter block at the first step.
            return {"dyn_biases": d_bias, "switch_biases": d_switch}
        _, x_prev = split(lat_prev)
        resid = x_c - trans_mean(z, x_prev)
        d_bias[np.arange(n), z] = np.einsum("nij,nj->ni", inv_q[z], resid)
        logits = _switch_logits(params, x_prev)
        probs = np.exp(logits - logsumexp(logits, axis=-1, keepdims=True))
        d_switch = -probs
        d_switch[np.arange(n), z] += 1.0
        return {"dyn_biases": d_bias, "switch_biases": d_switch}

    return ModelSpec(
        dim_x=3,
        dim_y=obs_dim,
        horizon=horizon,
        log_init=log_init,
        log_trans=log_trans,
        log_obs=log_obs,
        sample_init=sample_init,
        sample_trans=sample_trans,
        sample_obs=sample_obs,
        theta_grads=theta_grads,
    )


def slds_model_builder(params: SLDSParams, horizon: int):
    """Builder mapping a learnable theta store onto the model."""

    def build(theta):
        current = params
        if "dyn_biases" in theta:
            current = replace(
                current, dyn_biases=np.asarray(theta["dyn_biases"], dtype=float)
            )
        if "switch_biases" in theta:
            current = replace(
                current,
                switch_biases=np.asarray(theta["switch_biases"], dtype=float),
            )
        return slds_model(current, horizon)

    return build


@dataclass(frozen=True)
class SLDSOracle:
    """Exact posterior summaries from discrete-path enumeration."""

    log_z: float
    z_marginals: np.ndarray  # (T, K)
    x_means: np.ndarray  # (T, 2)
    x_covs: np.ndarray  # (T, 2, 2)


def _path_kalman(params: SLDSParams, path, y):
    """Evidence and smoothed moments of the LGSSM induced by one path."""
    t_len = y.shape[0]
    c_mat = params.emission_mat
    d_vec = params.emission_bias
    s_cov = params.emission_cov
    m_f = np.empty((t_len, 2))
    p_f = np.empty((t_len, 2, 2))
    m_pred = np.empty((t_len, 2))
    p_pred = np.empty((t_len, 2, 2))
    log_ev = 0.0
    mean, cov = np.zeros(2), params.dyn_covs[path[0]]
    for t in range(t_len):
        if t > 0:
            a_mat = params.dyn_mats[path[t]]
            mean = a_mat @ mean + params.dyn_biases[path[t]]
            cov = a_mat @ cov @ a_mat.T + params.dyn_covs[path[t]]
        m_pred[t], p_pred[t] = mean, cov
        resid = y[t] - (c_mat @ mean + d_vec)
        innov = c_mat @ cov @ c_mat.T + s_cov
        chol = np.linalg.cholesky(innov)
        alpha = np.linalg.solve(chol, resid)
        log_ev += -0.5 * (
            y.shape[1] * _LOG2PI
            + 2.0 * np.sum(np.log(np.diag(chol)))
            + alpha @ alpha
        )
        gain = cov @ c_mat.T @ np.linalg.inv(innov)
        mean = mean + gain @ resid
        cov = cov - gain @ c_mat @ cov
        m_f[t], p_f[t] = mean, cov

    m_s = np.empty_like(m_f)
    p_s = np.empty_like(p_f)
    m_s[-1], p_s[-1] = m_f[-1], p_f[-1]
    for t in range(t_len - 2, -1, -1):
        a_next = params.dyn_mats[path[t + 1]]
        gain = p_f[t] @ a_next.T @ np.linalg.inv(p_pred[t + 1])
        m_s[t] = m_f[t] + gain @ (m_s[t + 1] - m_pred[t + 1])
        p_s[t] = p_f[t] + gain @ (p_s[t + 1] - p_pred[t + 1]) @ gain.T
    return log_ev, m_s, p_s


def enumerate_posterior(params: SLDSParams, y: np.ndarray) -> SLDSOracle:
    """Exact posterior by summing over all discrete paths.

    Only valid for non-recurrent switching (R = 0), where the path prior
    is available in closed form; the per-path continuous model is then
    linear-Gaussian and handled by a Kalman filter/smoother.

    Raises:
        ValueError: for recurrent parameters or when ``K^T`` exceeds the
            enumeration budget.
    """
    if params.recurrent:
        raise ValueError(
            "enumeration oracle requires non-recurrent switching (R = 0)"
        )
    y = np.asarray(y, dtype=float)
    t_len = y.shape[0]
    k_states = params.num_states
    n_paths = k_states**t_len
    if n_paths > ENUMERATION_BUDGET:
        raise ValueError(
            f"enumeration budget exceeded: K^T = {n_paths} > {ENUMERATION_BUDGET}"
        )
    log_prior_step = params.switch_biases - logsumexp(params.switch_biases)

    log_posts = np.empty(n_paths)
    means = np.empty((n_paths, t_len, 2))
    covs = np.empty((n_paths, t_len, 2, 2))
    paths = np.empty((n_paths, t_len), dtype=int)
    for i, path in enumerate(itertools.product(range(k_states), repeat=t_len)):
        path = np.asarray(path)
        log_prior = -np.log(k_states) + log_prior_step[path[1:]].sum()
        log_ev, m_s, p_s = _path_kalman(params, path, y)
        log_posts[i] = log_prior + log_ev
        means[i], covs[i] = m_s, p_s
        paths[i] = path

    log_z = float(logsumexp(log_posts))
    weights = np.exp(log_posts - log_z)
    z_marg = np.zeros((t_len, k_states))
    for k in range(k_states):
        z_marg[:, k] = weights @ (paths == k)
    x_means = np.einsum("p,pti->ti", weights, means)
    second = np.einsum(
        "p,ptij->tij",
        weights,
        covs + np.einsum("pti,ptj->ptij", means, means),
    )
    x_covs = second - np.einsum("ti,tj->tij", x_means, x_means)
    return SLDSOracle(
        log_z=log_z, z_marginals=z_marg, x_means=x_means, x_covs=x_covs
    )


class SLDSProposal:
    """Mean-field proposal: per-step categorical for z, diagonal Gaussian
    for x, factorized over time and between the two latent groups.

    Only log-density gradients are needed for wake-sleep updates, so the
    discrete component requires no relaxation or score-function tricks.
    """

    def __init__(
        self, z_logits: np.ndarray, x_mean: np.ndarray, x_log_var: np.ndarray
    ):
        self.params = {
            "z_logits": np.asarray(z_logits, dtype=float).copy(),
            "x_mean": np.asarray(x_mean, dtype=float).copy(),
            "x_log_var": np.asarray(x_log_var, dtype=float).copy(),
        }

    @classmethod
    def uniform_init(cls, horizon: int, num_states: int) -> "SLDSProposal":
        return cls(
            np.zeros((horizon, num_states)),
            np.zeros((horizon, 2)),
            np.zeros((horizon, 2)),
        )

    @property
    def horizon(self) -> int:
        return self.params["z_logits"].shape[0]

    @property
    def num_states(self) -> int:
        return self.params["z_logits"].shape[1]

    def _z_log_probs(self, t):
        logits = self.params["z_logits"][t]
        return logits - logsumexp(logits)

    def sample(self, t, x_prev, n, gen):
        probs = np.exp(self._z_log_probs(t))
        z = gen.choice(self.num_states, size=n, p=probs)
        mean = self.params["x_mean"][t]
        sd = np.exp(0.5 * self.params["x_log_var"][t])
        x_c = mean + sd * gen.standard_normal((n, 2))
        return np.concatenate([z[:, None].astype(float), x_c], axis=1)

    def log_prob(self, t, lat, x_prev):
        z = lat[..., 0].astype(int)
        x_c = lat[..., 1:]
        mean = self.params["x_mean"][t]
        log_var = self.params["x_log_var"][t]
        gauss = -0.5 * np.sum(
            _LOG2PI + log_var + (x_c - mean) ** 2 / np.exp(log_var), axis=-1
        )
        return self._z_log_probs(t)[z] + gauss

    def param_grads(self, t, lat, x_prev):
        n = lat.shape[0]
        z = lat[..., 0].astype(int)
        x_c = lat[..., 1:]
        t_len, k = self.params["z_logits"].shape
        d_logits = np.zeros((n, t_len, k))
        probs = np.exp(self._z_log_probs(t))
        d_logits[:, t, :] = -probs
        d_logits[np.arange(n), t, z] += 1.0
        mean = self.params["x_mean"][t]
        var = np.exp(self.params["x_log_var"][t])
        resid = x_c - mean
        d_mean = np.zeros((n, t_len, 2))
        d_logv = np.zeros((n, t_len, 2))
        d_mean[:, t] = resid / var
        d_logv[:, t] = -0.5 + resid**2 / (2.0 * var)
        return {"z_logits": d_logits, "x_mean": d_mean, "x_log_var": d_logv}


class SLDSQuadraticTwist:
    """Per-step quadratic twist in the continuous state plus per-(t, z)
    constants, trained by density-ratio classification.

    The continuous part mirrors the scalar quadratic family per dimension
    (diagonal conditional and prior-marginal variances, masked linear maps
    from future observations to the conditional means); the discrete part
    is a free table of constants.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        self.params = {k: np.asarray(v, dtype=float).copy() for k, v in params.items()}
        self.horizon = self.params["bias"].shape[0]
        t_len = self.horizon
        self._mask = np.triu(np.ones((t_len, t_len)), k=1)[:, None, :, None]

    @classmethod
    def default_init(
        cls, horizon: int, num_states: int, obs_dim: int
    ) -> "SLDSQuadraticTwist":
        return cls(
            {
                "log_sigma1_sq": np.zeros((horizon, 2)),
                "log_sigma2_sq": np.zeros((horizon, 2)),
                "weights": np.full(
                    (horizon, 2, horizon, obs_dim), 1.0 / (horizon * obs_dim)
                ),
                "bias": np.zeros((horizon, 2)),
                "z_const": np.zeros((horizon, num_states)),
            }
        )

    def _mu1(self, y):
        """``y`` is ``(..., T, D)``; returns ``(..., T, 2)``."""
        wm = self.params["weights"] * self._mask
        return np.einsum("...ud,tjud->...tj", y, wm) + self.params["bias"]

    def _quad_terms(self, t_slice, x_c, mu1):
        ls1 = self.params["log_sigma1_sq"][t_slice]
        ls2 = self.params["log_sigma2_sq"][t_slice]
        inv1 = np.exp(-ls1)
        inv2 = np.exp(-ls2)
        val = (
            -0.5 * (x_c - mu1) ** 2 * inv1
            - 0.5 * ls1
            + 0.5 * x_c**2 * inv2
            + 0.5 * ls2
        )
        return val.sum(axis=-1)

    def log_value(self, t, lat, y):
        if t >= self.horizon - 1:
            return np.zeros(lat.shape[0])
        z = lat[..., 0].astype(int)
        x_c = lat[..., 1:]
        mu1 = self._mu1(np.asarray(y, dtype=float))[t]
        return self._quad_terms(t, x_c, mu1) + self.params["z_const"][t, z]

    def dre_logits(self, lat, y):
        """Logits for DRE batches: ``lat (B, T-1, 3)``, ``y (B, T, D)``."""
        cut = self.horizon - 1
        z = lat[..., 0].astype(int)
        x_c = lat[..., 1:]
        mu1 = self._mu1(np.asarray(y, dtype=float))[:, :cut]
        quad = self._quad_terms(slice(None, cut), x_c, mu1)
        consts = np.take_along_axis(
            self.params["z_const"][:cut][None].repeat(lat.shape[0], 0),
            z[..., None],
            axis=-1,
        )[..., 0]
        return quad + consts

    def dre_logit_grads(self, lat, y, upstream):
        cut = self.horizon - 1
        z = lat[..., 0].astype(int)
        x_c = lat[..., 1:]
        y = np.asarray(y, dtype=float)
        mu1 = self._mu1(y)[:, :cut]
        ls1 = self.params["log_sigma1_sq"][:cut]
        ls2 = self.params["log_sigma2_sq"][:cut]
        inv1 = np.exp(-ls1)
        inv2 = np.exp(-ls2)

        d_ls1 = 0.5 * inv1 * (x_c - mu1) ** 2 - 0.5
        d_ls2 = 0.5 * (1.0 - inv2 * x_c**2)
        d_mu1 = inv1 * (x_c - mu1)

        up = upstream[..., None]
        g = {
            "log_sigma1_sq": np.zeros_like(self.params["log_sigma1_sq"]),
            "log_sigma2_sq": np.zeros_like(self.params["log_sigma2_sq"]),
            "bias": np.zeros_like(self.params["bias"]),
            "weights": np.zeros_like(self.params["weights"]),
            "z_const": np.zeros_like(self.params["z_const"]),
        }
        g["log_sigma1_sq"][:cut] = np.sum(up * d_ls1, axis=0)
        g["log_sigma2_sq"][:cut] = np.sum(up * d_ls2, axis=0)
        weighted = up * d_mu1  # (B, cut, 2)
        g["bias"][:cut] = weighted.sum(axis=0)
        g["weights"][:cut] = np.einsum("btj,bud->tjud", weighted, y)
        g["weights"] *= self._mask
        b_idx = np.arange(lat.shape[0])[:, None]
        t_idx = np.arange(cut)[None, :]
        np.add.at(g["z_const"], (t_idx, z), upstream)
        return g


def save_fixture(
    path: str | Path,
    params: SLDSParams,
    z: np.ndarray,
    x: np.ndarray,
    y: np.ndarray,
) -> None:
    """Fixture file: parameters plus one sampled sequence."""
    payload = {
        "params": {
            "dyn_mats": params.dyn_mats.tolist(),
            "dyn_biases": params.dyn_biases.tolist(),
            "dyn_covs": params.dyn_covs.tolist(),
            "switch_weights": params.switch_weights.tolist(),
            "switch_biases": params.switch_biases.tolist(),
            "emission_mat": params.emission_mat.tolist(),
            "emission_bias": params.emission_bias.tolist(),
            "emission_cov": params.emission_cov.tolist(),
        },
        "z": np.asarray(z).astype(int).tolist(),
        "x": np.asarray(x).tolist(),
        "y": np.asarray(y).tolist(),
    }
    Path(path).write_text(json.dumps(payload, indent=2))


def load_fixture(path: str | Path):
    payload = json.loads(Path(path).read_text())
    raw = {k: np.asarray(v, dtype=float) for k, v in payload["params"].items()}
    params = SLDSParams(**raw)
    return (
        params,
        np.asarray(payload["z"], dtype=int),
        np.asarray(payload["x"], dtype=float),
        np.asarray(payload["y"], dtype=float),
    )
