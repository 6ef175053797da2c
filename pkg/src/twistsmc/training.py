"""Training loops and gradient diagnostics.

The main loop alternates blocks of twist updates (density-ratio steps
against the current model) with blocks of proposal/model updates driven by
one of the wake-sleep estimators. A twist-pretraining phase is available
for inference-only runs where the model is frozen and the twist can be
fitted once up front.

Sign conventions: the model estimate ``d_theta`` is an ascent direction
for the log marginal likelihood and ``d_phi`` is the inclusive-KL
gradient, so Adam (a minimizer) receives ``-d_theta`` and ``+d_phi``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .estimators import (
    GradEstimate,
    nasmc_gradients,
    nasx_gradients,
    snis_rws_gradients,
)
from .optim import AdamState, adam_init, adam_step
from .rng import RngStream
from .smc import DegenerateSweepError, SMCConfig, smc_sweep
from .ssm import ModelSpec, Proposal
from .twist import TrainingDiverged, dre_loss_and_grad, sample_dre_batch

METHODS = ("nasx", "nasmc", "rws")

ModelBuilder = Callable[[Mapping[str, np.ndarray]], ModelSpec]


@dataclass(frozen=True)
class TrainConfig:
    """Schedule and hyperparameters for a training run.

    ``outer_rounds`` repetitions of (``twist_steps`` DRE updates, then
    ``proposal_steps`` estimator updates). ``twist_pretrain_steps`` run
    once before the first round. Methods without a twist ignore the twist
    settings.
    """

    method: str
    smc: SMCConfig
    outer_rounds: int = 1
    twist_steps: int = 0
    proposal_steps: int = 0
    twist_pretrain_steps: int = 0
    dre_batch_size: int = 32
    lr_proposal: float = 1e-3
    lr_twist: float = 1e-3
    lr_model: float = 1e-3
    learn_model: bool = False
    record_every: int = 50

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.method == "nasx" and self.smc.target_kind != "smoothing-twisted":
            raise ValueError("nasx requires smoothing-twisted targets")
        if self.method == "nasmc" and self.smc.target_kind != "filtering":
            raise ValueError("nasmc requires filtering targets")


@dataclass
class TrainResult:
    """Final parameters plus recorded per-step metrics."""

    theta: dict[str, np.ndarray]
    proposal: Proposal
    twist: object | None
    metrics: list[tuple[int, str, float]] = field(default_factory=list)

    def metric(self, name: str) -> np.ndarray:
        return np.asarray(
            [v for _, m, v in self.metrics if m == name], dtype=float
        )


def _estimate(
    method: str,
    model: ModelSpec,
    y: np.ndarray,
    proposal: Proposal,
    twist,
    cfg: SMCConfig,
    rng: RngStream,
) -> tuple[GradEstimate, float, int]:
    """One gradient estimate; returns (grads, log_z_hat, resample_count)."""
    if method == "rws":
        grads = snis_rws_gradients(model, proposal, y, cfg.num_particles, rng)
        return grads, np.nan, 0
    if method == "nasx":
        result = smc_sweep(model, y, proposal, cfg, rng, twist=twist)
        return (
            nasx_gradients(result, model, proposal, y),
            result.log_z_hat,
            result.resample_count,
        )
    result = smc_sweep(model, y, proposal, cfg, rng)
    return (
        nasmc_gradients(result, model, proposal, y),
        result.log_z_hat,
        result.resample_count,
    )


def _grad_norm(grads: Mapping[str, np.ndarray]) -> float:
    if not grads:
        return 0.0
    return float(np.sqrt(sum(np.sum(np.asarray(g) ** 2) for g in grads.values())))


def train(
    model_builder: ModelBuilder,
    theta0: Mapping[str, np.ndarray],
    y: np.ndarray,
    proposal: Proposal,
    cfg: TrainConfig,
    rng: RngStream,
    twist=None,
    callbacks: Mapping[str, Callable] | None = None,
) -> TrainResult:
    """Run the alternating twist / proposal(/model) training loop.

    Args:
        model_builder: maps a theta parameter store to a :class:`ModelSpec`;
            called again after every model update.
        theta0: initial model parameters (may be empty for inference-only).
        y: the observation sequence being fitted.
        proposal: learnable proposal; ``proposal.params`` is updated in
            place.
        cfg: schedules and learning rates.
        rng: root stream; every step derives an independent child.
        twist: learnable twist (required for nasx).
        callbacks: optional named functions ``(theta, proposal, twist) ->
            float`` recorded alongside the metrics every ``record_every``
            proposal steps.

    Returns:
        A :class:`TrainResult` with final parameters and metric rows
        ``(step, metric, value)``.

    Raises:
        TrainingDiverged: on non-finite losses or gradients; the exception
            carries the last finite parameter snapshot in ``last_good``.
    """
    if cfg.method == "nasx" and twist is None:
        raise ValueError("nasx training requires a twist")
    trainable_twist = twist is not None and bool(getattr(twist, "params", None))
    wants_twist_updates = cfg.twist_pretrain_steps or (
        cfg.outer_rounds and cfg.twist_steps
    )
    if wants_twist_updates and not trainable_twist:
        raise ValueError("twist updates scheduled but the twist has no parameters")
    theta = {k: np.asarray(v, dtype=float).copy() for k, v in theta0.items()}
    model = model_builder(theta)
    metrics: list[tuple[int, str, float]] = []

    prop_state = adam_init(proposal.params, lr=cfg.lr_proposal)
    theta_state = adam_init(theta, lr=cfg.lr_model) if cfg.learn_model else None
    twist_state = adam_init(twist.params, lr=cfg.lr_twist) if trainable_twist else None

    twist_step = 0
    prop_step = 0

    def snapshot():
        return {
            "theta": {k: v.copy() for k, v in theta.items()},
            "phi": {k: v.copy() for k, v in proposal.params.items()},
            "psi": {k: v.copy() for k, v in twist.params.items()}
            if trainable_twist
            else None,
        }

    last_good = snapshot()

    def run_twist_block(steps: int):
        nonlocal twist_state, twist_step, model
        for _ in range(steps):
            batch = sample_dre_batch(
                model, cfg.dre_batch_size, rng.child(1_000_000 + twist_step)
            )
            loss, grads = dre_loss_and_grad(twist, batch)
            if not np.isfinite(loss):
                exc = TrainingDiverged(
                    f"non-finite twist loss at twist step {twist_step}"
                )
                exc.last_good = last_good
                raise exc
            twist_state, twist.params = adam_step(twist_state, twist.params, grads)
            if twist_step % cfg.record_every == 0:
                metrics.append((twist_step, "twist_loss", loss))
            twist_step += 1

    def run_proposal_block(steps: int):
        nonlocal prop_state, theta_state, prop_step, model, last_good
        for _ in range(steps):
            try:
                grads, log_z, n_resampled = _estimate(
                    cfg.method, model, y, proposal, twist, cfg.smc,
                    rng.child(2_000_000 + prop_step),
                )
                if grads.d_phi:
                    prop_state, proposal.params = adam_step(
                        prop_state, proposal.params, grads.d_phi
                    )
                if cfg.learn_model and grads.d_theta:
                    loss_grads = {k: -v for k, v in grads.d_theta.items()}
                    theta_state, new_theta = adam_step(
                        theta_state, theta, loss_grads
                    )
                    theta.clear()
                    theta.update(new_theta)
                    model = model_builder(theta)
            except (ValueError, DegenerateSweepError) as err:
                exc = TrainingDiverged(
                    f"divergence at proposal step {prop_step}: {err}"
                )
                exc.last_good = last_good
                raise exc from err
            if prop_step % cfg.record_every == 0:
                metrics.append((prop_step, "log_z_hat", float(log_z)))
                metrics.append((prop_step, "resample_count", float(n_resampled)))
                metrics.append((prop_step, "grad_norm_phi", _grad_norm(grads.d_phi)))
                metrics.append(
                    (prop_step, "grad_norm_theta", _grad_norm(grads.d_theta))
                )
                for name, fn in (callbacks or {}).items():
                    metrics.append((prop_step, name, float(fn(theta, proposal, twist))))
            last_good = snapshot()
            prop_step += 1

    if trainable_twist and cfg.twist_pretrain_steps:
        run_twist_block(cfg.twist_pretrain_steps)
    for _ in range(cfg.outer_rounds):
        if trainable_twist and cfg.twist_steps:
            run_twist_block(cfg.twist_steps)
        if cfg.proposal_steps:
            run_proposal_block(cfg.proposal_steps)

    return TrainResult(theta=theta, proposal=proposal, twist=twist, metrics=metrics)


def gradient_bias_variance_report(
    estimators: Mapping[str, dict],
    model: ModelSpec,
    y: np.ndarray,
    reference: Mapping[str, float],
    reps: int,
    rng: RngStream,
) -> list[dict]:
    """Empirical bias/variance table for theta-gradient estimators.

    Args:
        estimators: name -> settings dict with keys ``method``, ``smc``
            (an :class:`SMCConfig`), ``proposal`` and optional ``twist``;
            every named configuration is replicated ``reps`` times on
            independent streams.
        model: the (fixed) model whose parameter gradients are estimated.
        y: observation sequence.
        reference: oracle gradient per flattened parameter component.
        reps: number of replications R.
        rng: root stream.

    Returns:
        One row (dict) per estimator and parameter component with the
        empirical mean, variance (NaN sentinel when R = 1), bias against
        the reference, the standard error of the mean, and the bias
        z-score.
    """
    rows = []
    for est_idx, (name, spec) in enumerate(estimators.items()):
        draws: dict[str, np.ndarray] = {}
        for r in range(reps):
            grads, _, _ = _estimate(
                spec["method"],
                model,
                y,
                spec["proposal"],
                spec.get("twist"),
                spec["smc"],
                rng.child(est_idx * 1_000_000 + r),
            )
            for pname, val in grads.d_theta.items():
                flat = np.asarray(val, dtype=float).reshape(-1)
                for i, v in enumerate(flat):
                    key = pname if flat.size == 1 else f"{pname}[{i}]"
                    draws.setdefault(key, np.empty(reps))[r] = v
        for pname, values in draws.items():
            mean = float(values.mean())
            var = float(values.var(ddof=1)) if reps > 1 else float("nan")
            se = float(np.sqrt(var / reps)) if reps > 1 else float("nan")
            bias = mean - float(reference[pname])
            rows.append(
                {
                    "estimator": name,
                    "parameter": pname,
                    "reps": reps,
                    "mean": mean,
                    "variance": var,
                    "bias": bias,
                    "se": se,
                    "bias_z": bias / se if reps > 1 and se > 0 else float("nan"),
                }
            )
    return rows
