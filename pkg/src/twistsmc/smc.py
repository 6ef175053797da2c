"""Sequential Monte Carlo sweep over filtering or twist-augmented targets.

One engine covers both target families. With filtering targets the
unnormalized target at step t is the partial joint
``p(x_{0:t}, y_{0:t})``; with twisted targets it is the partial joint
multiplied by a twist ``r(t, x_t, y)`` approximating the lookahead density
``p(y_{t+1:} | x_t)``, which turns the intermediate distributions into
approximations of the smoothing posteriors. The final target drops the
twist (``log r = 0`` at the last step), so the terminal target is always
proportional to the full joint.

Incremental weights follow the standard telescoping form

    log alpha_t = log gamma_t(x_{0:t}) - log gamma_{t-1}(x_{0:t-1})
                  - log q(x_t | x_{t-1}),

with ``gamma_{-1} := 1``. Weighting happens before any resampling at each
step; resampling is triggered per configuration, recorded, and never
performed after the final weighting (it would only add noise).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .resampling import RESAMPLE_SCHEMES, resample_indices
from .rng import RngStream
from .ssm import ModelSpec, Proposal
from .weights import (
    DegenerateWeightsError,
    LogWeights,
    effective_sample_size,
    normalize_log_weights,
)

TARGET_KINDS = ("filtering", "smoothing-twisted")
RESAMPLE_TRIGGERS = ("always", "ess_fraction")

_LOG = np.log


class DegenerateSweepError(RuntimeError):
    """Every particle got a non-finite incremental weight at one timestep."""

    def __init__(self, t: int):
        super().__init__(f"degenerate sweep: all particles failed at timestep {t}")
        self.timestep = t


class Twist(Protocol):
    """Twist function ``log r(y_{t+1:}, x_t)`` evaluated per particle."""

    def log_value(self, t: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Return ``(N,)`` log twist values at step ``t`` (0-based)."""
        ...


@dataclass(frozen=True)
class SMCConfig:
    """Sweep configuration.

    Attributes:
        num_particles: N >= 1.
        resample_scheme: ``"multinomial-alias"`` or ``"systematic"``.
        resample_trigger: ``"always"`` or ``"ess_fraction"`` (resample when
            ESS < ess_threshold * N).
        ess_threshold: trigger fraction in (0, 1]; default N/2.
        target_kind: ``"filtering"`` or ``"smoothing-twisted"``.
    """

    num_particles: int
    resample_scheme: str = "multinomial-alias"
    resample_trigger: str = "ess_fraction"
    ess_threshold: float = 0.5
    target_kind: str = "filtering"

    def __post_init__(self):
        if self.num_particles < 1:
            raise ValueError("num_particles must be >= 1")
        if self.resample_scheme not in RESAMPLE_SCHEMES:
            raise ValueError(f"unknown resample_scheme {self.resample_scheme!r}")
        if self.resample_trigger not in RESAMPLE_TRIGGERS:
            raise ValueError(f"unknown resample_trigger {self.resample_trigger!r}")
        if not 0.0 < self.ess_threshold <= 1.0:
            raise ValueError("ess_threshold must lie in (0, 1]")
        if self.target_kind not in TARGET_KINDS:
            raise ValueError(f"unknown target_kind {self.target_kind!r}")


@dataclass(frozen=True)
class ParticleEnsemble:
    """The weighted particle system recorded at one timestep.

    Weights are the pre-resampling (time-t) weights: normalized products of
    incremental weights accumulated since the last resampling event.

    Attributes:
        particles: ``(N, dim_x)`` states at this step.
        log_alpha: ``(N,)`` incremental log-weights.
        weights: accumulated normalized weights at this step.
        ancestors: ``(N,)`` parent indices in the previous ensemble used to
            extend each particle (identity when no resampling occurred
            after the previous step; identity at t = 0).
        resampled: whether resampling was performed after this step's
            weighting.
        ess: effective sample size of ``weights``.
    """

    particles: np.ndarray
    log_alpha: np.ndarray
    weights: LogWeights
    ancestors: np.ndarray
    resampled: bool
    ess: float


@dataclass(frozen=True)
class SMCResult:
    """Full sweep history plus the marginal-likelihood estimate."""

    steps: tuple[ParticleEnsemble, ...]
    log_z_hat: float
    resample_count: int
    target_kind: str
    num_particles: int

    @property
    def horizon(self) -> int:
        return len(self.steps)

    def recompute_log_z(self) -> float:
        """Re-derive log Z from stored increments and resampling flags.

        Sums ``logsumexp(accumulated log-weights) - log N`` over each
        resampling epoch; equals :attr:`log_z_hat` up to float roundoff.
        """
        n = self.num_particles
        total = 0.0
        for t, step in enumerate(self.steps):
            last = t == len(self.steps) - 1
            if step.resampled or last:
                total += step.weights.log_sum - _LOG(n)
        return float(total)

    def trajectories(self) -> np.ndarray:
        """Ancestry-resolved trajectories of the final ensemble, ``(N, T, dim_x)``.

        Weighted by the final step's weights these approximate the time-T
        (full-path) posterior.
        """
        n = self.num_particles
        t_len = self.horizon
        out = np.empty((n, t_len, self.steps[0].particles.shape[1]))
        idx = np.arange(n)
        for t in range(t_len - 1, -1, -1):
            out[:, t] = self.steps[t].particles[idx]
            idx = self.steps[t].ancestors[idx]
        return out


def smc_sweep(
    model: ModelSpec,
    y: np.ndarray,
    proposal: Proposal,
    cfg: SMCConfig,
    rng: RngStream,
    twist: Twist | None = None,
) -> SMCResult:
    """Run one SMC sweep.

    Args:
        model: the state-space model.
        y: observations, shape ``(T, dim_y)``.
        proposal: per-step proposal distribution.
        cfg: sweep configuration; ``target_kind`` must be
            ``"smoothing-twisted"`` exactly when ``twist`` is given.
        rng: random stream for the whole sweep.
        twist: twist function for smoothing targets (the final step always
            contributes ``log r = 0`` regardless of the twist object).

    Returns:
        The ensemble history and the log marginal-likelihood estimate.

    Raises:
        DegenerateSweepError: if every particle's incremental weight is
            non-finite at some timestep.
    """
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    t_len = model.horizon
    if y.shape != (t_len, model.dim_y):
        raise ValueError(f"observations must have shape ({t_len}, {model.dim_y})")
    twisted = cfg.target_kind == "smoothing-twisted"
    if twisted and twist is None:
        raise ValueError("smoothing-twisted targets require a twist")
    if not twisted and twist is not None:
        raise ValueError("filtering targets must not be given a twist")

    gen = rng.generator()
    n = cfg.num_particles
    log_n = _LOG(n)

    steps: list[ParticleEnsemble] = []
    log_w = np.zeros(n)  # accumulated since the last resampling event
    log_z = 0.0
    resample_count = 0
    x_prev: np.ndarray | None = None
    log_r_prev = np.zeros(n)
    ancestors = np.arange(n)
    resampled_prev = False

    for t in range(t_len):
        x = proposal.sample(t, x_prev, n, gen)
        if t == 0:
            log_p = model.log_init(x)
        else:
            log_p = model.log_trans(t, x, x_prev)
        log_p = log_p + model.log_obs(t, y[t], x)
        log_q = proposal.log_prob(t, x, x_prev)
        if twisted:
            if t < t_len - 1:
                log_r = np.asarray(twist.log_value(t, x, y), dtype=float)
            else:
                log_r = np.zeros(n)
            log_alpha = log_p + log_r - log_r_prev - log_q
        else:
            log_r = None
            log_alpha = log_p - log_q

        log_alpha = np.where(np.isfinite(log_alpha), log_alpha, -np.inf)
        if not np.isfinite(log_alpha).any():
            raise DegenerateSweepError(t)
        log_w = log_w + log_alpha
        try:
            weights = normalize_log_weights(log_w)
        except DegenerateWeightsError as exc:
            raise DegenerateSweepError(t) from exc
        ess = effective_sample_size(weights)

        do_resample = False
        if t < t_len - 1:
            if cfg.resample_trigger == "always":
                do_resample = True
            else:
                do_resample = ess < cfg.ess_threshold * n

        steps.append(
            ParticleEnsemble(
                particles=x,
                log_alpha=log_alpha,
                weights=weights,
                ancestors=ancestors,
                resampled=do_resample,
                ess=ess,
            )
        )

        if do_resample:
            log_z += weights.log_sum - log_n
            ancestors = resample_indices(weights, n, cfg.resample_scheme, gen)
            x_prev = x[ancestors]
            if twisted:
                log_r_prev = log_r[ancestors]
            log_w = np.zeros(n)
            resample_count += 1
        else:
            ancestors = np.arange(n)
            x_prev = x
            if twisted:
                log_r_prev = log_r

    log_z += normalize_log_weights(log_w).log_sum - log_n
    return SMCResult(
        steps=tuple(steps),
        log_z_hat=float(log_z),
        resample_count=resample_count,
        target_kind=cfg.target_kind,
        num_particles=n,
    )


TestFn = Callable[[int, np.ndarray], np.ndarray]


def posterior_expectation(
    result: SMCResult, test_fn: TestFn, mode: str = "time-t"
) -> np.ndarray:
    """Estimate per-timestep posterior expectations of a path functional.

    Args:
        result: a completed sweep.
        test_fn: ``(t, prefix) -> (N,) or (N, k)`` where ``prefix`` has
            shape ``(N, t+1, dim_x)`` and holds each particle's ancestry
            -resolved path through step ``t``.
        mode: ``"time-t"`` weights the step-t ensemble with its own
            weights (the intermediate-target approximation, the choice
            that limits particle degeneracy); ``"time-T"`` weights the
            prefixes of the final ensemble's lineages with the final
            weights. The two differ whenever resampling occurred.

    Returns:
        Array of shape ``(T, k)`` of expectation estimates.
    """
    if mode not in ("time-t", "time-T"):
        raise ValueError(f"unknown mode {mode!r}")
    t_len = result.horizon
    n = result.num_particles
    out = []
    if mode == "time-t":
        prefix: np.ndarray | None = None
        for t, step in enumerate(result.steps):
            x_t = step.particles[:, None, :]
            if prefix is None:
                prefix = x_t
            else:
                prefix = np.concatenate([prefix[step.ancestors], x_t], axis=1)
            vals = np.atleast_2d(
                np.asarray(test_fn(t, prefix), dtype=float).reshape(n, -1)
            )
            out.append(step.weights.normalized @ vals)
        return np.stack(out)
    paths = result.trajectories()
    w_final = result.steps[-1].weights.normalized
    for t in range(t_len):
        vals = np.asarray(test_fn(t, paths[:, : t + 1]), dtype=float).reshape(n, -1)
        out.append(w_final @ vals)
    return np.stack(out)
