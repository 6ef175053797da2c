"""Wake-sleep gradient estimators for model and proposal parameters.

All three estimators approximate the same two posterior expectations: the
marginal-likelihood gradient (the posterior mean of the per-step joint
score, by the log-derivative identity) and the inclusive-KL gradient for
the proposal (the negative posterior mean of ``grad log q``). They differ
only in which weighted-sample approximation of the posterior supplies the
expectation:

* ``nasx_gradients`` - twisted smoothing SMC; the time-t ensembles already
  target the smoothing marginals, so the estimator is consistent and,
  under an optimal proposal and twist, exactly unbiased.
* ``nasmc_gradients`` - filtering SMC; the time-t ensembles target the
  filtering marginals, which ignores future observations and biases
  per-step quantities toward the filter.
* ``snis_rws_gradients`` - plain self-normalized importance sampling over
  whole trajectories; consistent, but its weight variance grows quickly
  with sequence length.

The estimator/target pairing is enforced: the twisted-sweep math is never
silently applied to a filtering sweep or vice versa.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .smc import SMCResult
from .ssm import ModelSpec, Proposal
from .weights import normalize_log_weights


class EstimatorTargetMismatch(ValueError):
    """A gradient estimator was fed a sweep with the wrong target kind."""


@dataclass(frozen=True)
class GradEstimate:
    """Named gradient accumulators for model (theta) and proposal (phi).

    ``d_theta`` follows the ascent direction of the log marginal
    likelihood; ``d_phi`` is the gradient of the inclusive KL divergence
    (a descent direction for proposal fitting). Adding to ``d_theta`` and
    descending ``d_phi`` therefore improves both.
    """

    d_theta: dict[str, np.ndarray]
    d_phi: dict[str, np.ndarray]
    estimator: str
    num_particles: int
    weighting: str = "time-t"


def _weighted_sweep_grads(
    result: SMCResult, model: ModelSpec, proposal: Proposal, y: np.ndarray
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    d_theta: dict[str, np.ndarray] = {}
    d_phi: dict[str, np.ndarray] = {}
    for t, step in enumerate(result.steps):
        w = step.weights.normalized
        x_t = step.particles
        if t == 0:
            x_prev = None
        else:
            prev = result.steps[t - 1].particles
            x_prev = prev[step.ancestors]
        if model.theta_grads is not None:
            for name, g in model.theta_grads(t, x_t, x_prev, y[t]).items():
                contrib = np.tensordot(w, np.asarray(g, dtype=float), axes=(0, 0))
                d_theta[name] = d_theta.get(name, 0.0) + contrib
        for name, g in proposal.param_grads(t, x_t, x_prev).items():
            contrib = np.tensordot(w, np.asarray(g, dtype=float), axes=(0, 0))
            d_phi[name] = d_phi.get(name, 0.0) - contrib
    return d_theta, d_phi


def nasx_gradients(
    result: SMCResult, model: ModelSpec, proposal: Proposal, y: np.ndarray
) -> GradEstimate:
    """Smoothing-weighted estimates of the theta and phi gradients.

    Accumulates, over timesteps and particles, the time-t ensemble weights
    against the per-step joint score for theta and against
    ``-grad log q`` for phi.

    Args:
        result: a sweep run with smoothing-twisted targets.
        model: supplies the per-step score hooks.
        proposal: supplies ``param_grads``.
        y: the observations the sweep conditioned on.

    Raises:
        EstimatorTargetMismatch: if the sweep used filtering targets.
    """
    if result.target_kind != "smoothing-twisted":
        raise EstimatorTargetMismatch(
            "nasx_gradients requires a smoothing-twisted sweep, got "
            f"{result.target_kind!r}"
        )
    d_theta, d_phi = _weighted_sweep_grads(result, model, proposal, y)
    return GradEstimate(d_theta, d_phi, "nasx", result.num_particles)


def nasmc_gradients(
    result: SMCResult, model: ModelSpec, proposal: Proposal, y: np.ndarray
) -> GradEstimate:
    """Filtering-weighted counterpart of :func:`nasx_gradients`.

    Identical summation structure; the weights come from a filtering sweep
    so per-step expectations target the filtering marginals.
    """
    if result.target_kind != "filtering":
        raise EstimatorTargetMismatch(
            "nasmc_gradients requires a filtering sweep, got "
            f"{result.target_kind!r}"
        )
    d_theta, d_phi = _weighted_sweep_grads(result, model, proposal, y)
    return GradEstimate(d_theta, d_phi, "nasmc", result.num_particles)


def snis_rws_gradients(
    model: ModelSpec,
    proposal: Proposal,
    y: np.ndarray,
    num_samples: int,
    rng: RngStream,
) -> GradEstimate:
    """Whole-trajectory self-normalized importance sampling estimates.

    Draws ``num_samples`` full trajectories from the proposal, weights
    them by ``p(x, y)/q(x)`` normalized to one, and averages the same
    per-step scores as the SMC estimators under those trajectory weights.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    gen = rng.generator()
    n = num_samples
    t_len = model.horizon

    xs = np.empty((t_len, n, model.dim_x))
    log_w = np.zeros(n)
    x_prev: np.ndarray | None = None
    for t in range(t_len):
        x = proposal.sample(t, x_prev, n, gen)
        log_p = model.log_init(x) if t == 0 else model.log_trans(t, x, x_prev)
        log_p = log_p + model.log_obs(t, y[t], x)
        log_w += log_p - proposal.log_prob(t, x, x_prev)
        xs[t] = x
        x_prev = x
    w = normalize_log_weights(log_w).normalized

    d_theta: dict[str, np.ndarray] = {}
    d_phi: dict[str, np.ndarray] = {}
    for t in range(t_len):
        x_prev = xs[t - 1] if t > 0 else None
        if model.theta_grads is not None:
            for name, g in model.theta_grads(t, xs[t], x_prev, y[t]).items():
                contrib = np.tensordot(w, np.asarray(g, dtype=float), axes=(0, 0))
                d_theta[name] = d_theta.get(name, 0.0) + contrib
        for name, g in proposal.param_grads(t, xs[t], x_prev).items():
            contrib = np.tensordot(w, np.asarray(g, dtype=float), axes=(0, 0))
            d_phi[name] = d_phi.get(name, 0.0) - contrib
    return GradEstimate(d_theta, d_phi, "rws", n)
