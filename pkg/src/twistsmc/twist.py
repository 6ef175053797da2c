"""Twist functions learned by density-ratio estimation.

A twist approximates the lookahead density ``p(y_{t+1:} | x_t)`` up to a
factor independent of ``x_t``. Writing that density as the ratio
``p(x_t | y_{t+1:}) / p(x_t)`` reduces twist learning to binary
classification: train a classifier to tell jointly-sampled pairs
``(x_t, y_{t+1:})`` apart from pairs where the latent comes from an
independent model rollout, and its pre-sigmoid output converges to the log
ratio (plus ``log(rho/(1-rho))``, which vanishes at the balanced class
rate 0.5 used here).

For a scalar linear-Gaussian latent both densities in the ratio are
Gaussian, so the exact log ratio is the quadratic

    a x^2 + b x + c,
    a = -(1/s1 - 1/s2)/2,   b = mu1/s1,
    c = -mu1^2/(2 s1) - log sqrt(s1) + log sqrt(s2),

where ``N(mu1, s1)`` is the conditional of ``x_t`` given the future
observations and ``N(0, s2)`` its prior marginal. :class:`QuadraticTwist`
parameterizes exactly this family: per-step log variances plus a masked
linear map taking future observations to ``mu1``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .optim import AdamState, adam_init, adam_step
from .rng import RngStream
from .ssm import ModelSpec


class TrainingDiverged(RuntimeError):
    """A training loop hit a non-finite loss or gradient."""


@dataclass(frozen=True)
class DREBatch:
    """Paired classifier data from model rollouts.

    One joint rollout contributes a positive example ``(x_t, y_{t+1:})``
    for every non-final step; an independent prior rollout paired with the
    same observations contributes the matching negative, so classes are
    balanced by construction.

    Attributes:
        positives: latents from joint rollouts, ``(B, T-1, dim_x)``.
        negatives: latents from independent prior rollouts, same shape.
        y: observations shared by each pair, ``(B, T, dim_y)``.
        timesteps: the step indices covered, ``arange(T-1)``.
    """

    positives: np.ndarray
    negatives: np.ndarray
    y: np.ndarray
    timesteps: np.ndarray

    @property
    def num_examples(self) -> int:
        return 2 * self.positives.shape[0] * self.positives.shape[1]

    @property
    def labels(self) -> np.ndarray:
        half = self.num_examples // 2
        return np.concatenate([np.ones(half), np.zeros(half)])


def sample_dre_batch(
    model: ModelSpec, batch_size: int, rng: RngStream | np.random.Generator
) -> DREBatch:
    """Draw a balanced classifier batch from the model.

    Args:
        model: generative model with horizon T >= 2.
        batch_size: number of rollout pairs B >= 1; the batch then holds
            ``B * (T-1)`` positive and as many negative examples.
        rng: randomness for both the joint and the prior rollouts.

    Returns:
        A :class:`DREBatch`.
    """
    if batch_size < 1:
        raise ValueError("empty batch: batch_size must be >= 1")
    if model.horizon < 2:
        raise ValueError("density-ratio batches need horizon >= 2")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    x_joint, y = model.sample_joint(batch_size, gen)
    x_prior = model.sample_prior(batch_size, gen)
    t_cut = model.horizon - 1
    return DREBatch(
        positives=x_joint[:, :t_cut],
        negatives=x_prior[:, :t_cut],
        y=y,
        timesteps=np.arange(t_cut),
    )


class QuadraticTwist:
    """Per-step quadratic twist for a one-dimensional latent.

    Parameters (all learnable):
        ``log_sigma1_sq``: ``(T,)`` conditional log-variances.
        ``log_sigma2_sq``: ``(T,)`` prior-marginal log-variances.
        ``weights``: ``(T, T)`` linear map to the conditional mean; row t
            only acts on observations strictly after t (enforced by mask).
        ``bias``: ``(T,)`` conditional-mean offsets.

    The twist value at the final step is identically zero, so the last
    target of a twisted sweep is the untwisted joint.
    """

    def __init__(self, params: dict[str, np.ndarray]):
        horizon = params["bias"].shape[0]
        self.horizon = horizon
        self.params = {k: np.asarray(v, dtype=float).copy() for k, v in params.items()}
        self._mask = np.triu(np.ones((horizon, horizon)), k=1)

    @classmethod
    def default_init(cls, horizon: int) -> "QuadraticTwist":
        """Mean map at 1/T, biases and log-variances at zero."""
        return cls(
            {
                "log_sigma1_sq": np.zeros(horizon),
                "log_sigma2_sq": np.zeros(horizon),
                "weights": np.full((horizon, horizon), 1.0 / horizon),
                "bias": np.zeros(horizon),
            }
        )

    # -- evaluation -----------------------------------------------------

    def _mu1(self, y2: np.ndarray) -> np.ndarray:
        """Conditional means; ``y2`` is ``(..., T)``, result ``(..., T)``."""
        wm = self.params["weights"] * self._mask
        return y2 @ wm.T + self.params["bias"]

    def coeffs(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Quadratic coefficients ``(a, b, c)`` for one observation sequence."""
        y2 = np.asarray(y, dtype=float).reshape(-1)
        ls1 = self.params["log_sigma1_sq"]
        ls2 = self.params["log_sigma2_sq"]
        inv1 = np.exp(-ls1)
        inv2 = np.exp(-ls2)
        mu1 = self._mu1(y2)
        a = -0.5 * (inv1 - inv2)
        b = mu1 * inv1
        c = -0.5 * mu1**2 * inv1 + 0.5 * (ls2 - ls1)
        return a, b, c

    def log_value(self, t: int, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Twist values for an SMC sweep; zero at the final step."""
        xv = np.asarray(x, dtype=float).reshape(-1)
        if t >= self.horizon - 1:
            return np.zeros(xv.shape[0])
        a, b, c = self.coeffs(y)
        return a[t] * xv**2 + b[t] * xv + c[t]

    def dre_logits(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Classifier logits for batched examples.

        Args:
            x: latents at steps ``0..T-2``, shape ``(B, T-1, 1)``.
            y: observations, shape ``(B, T, 1)``.

        Returns:
            Logits ``(B, T-1)``.
        """
        t_cut = self.horizon - 1
        xv = np.asarray(x, dtype=float)[..., 0]
        y2 = np.asarray(y, dtype=float)[..., 0]
        ls1 = self.params["log_sigma1_sq"][:t_cut]
        ls2 = self.params["log_sigma2_sq"][:t_cut]
        inv1 = np.exp(-ls1)
        inv2 = np.exp(-ls2)
        mu1 = self._mu1(y2)[:, :t_cut]
        a = -0.5 * (inv1 - inv2)
        c = -0.5 * mu1**2 * inv1 + 0.5 * (ls2 - ls1)
        return a * xv**2 + mu1 * inv1 * xv + c

    def dre_logit_grads(
        self, x: np.ndarray, y: np.ndarray, upstream: np.ndarray
    ) -> dict[str, np.ndarray]:
        """Parameter gradients of ``sum(upstream * logits)``.

        ``upstream`` has shape ``(B, T-1)``; the return matches
        ``self.params`` in keys and shapes.
        """
        t_cut = self.horizon - 1
        xv = np.asarray(x, dtype=float)[..., 0]
        y2 = np.asarray(y, dtype=float)[..., 0]
        ls1 = self.params["log_sigma1_sq"][:t_cut]
        ls2 = self.params["log_sigma2_sq"][:t_cut]
        inv1 = np.exp(-ls1)
        inv2 = np.exp(-ls2)
        mu1 = self._mu1(y2)[:, :t_cut]

        d_ls1 = 0.5 * inv1 * (xv - mu1) ** 2 - 0.5
        d_ls2 = 0.5 * (1.0 - inv2 * xv**2)
        d_mu1 = inv1 * (xv - mu1)

        g_ls1 = np.zeros(self.horizon)
        g_ls2 = np.zeros(self.horizon)
        g_bias = np.zeros(self.horizon)
        g_w = np.zeros((self.horizon, self.horizon))
        g_ls1[:t_cut] = np.sum(upstream * d_ls1, axis=0)
        g_ls2[:t_cut] = np.sum(upstream * d_ls2, axis=0)
        weighted = upstream * d_mu1
        g_bias[:t_cut] = np.sum(weighted, axis=0)
        g_w[:t_cut] = weighted.T @ y2
        g_w *= self._mask
        return {
            "log_sigma1_sq": g_ls1,
            "log_sigma2_sq": g_ls2,
            "weights": g_w,
            "bias": g_bias,
        }


def dre_loss_and_grad(twist, batch: DREBatch) -> tuple[float, dict[str, np.ndarray]]:
    """Balanced binary cross-entropy of the twist classifier, with gradients.

    The loss is the mean per-example negative log-likelihood over the
    ``2 B (T-1)`` examples in the batch (so an uninformative classifier
    with zero logits scores ``ln 2``); descending it maximizes the
    classification objective. Gradients are analytic through the quadratic
    form and the sigmoid, computed via stable ``logaddexp`` forms.
    """
    if batch.positives.shape[0] == 0:
        raise ValueError("empty batch")
    r_pos = twist.dre_logits(batch.positives, batch.y)
    r_neg = twist.dre_logits(batch.negatives, batch.y)
    m = batch.num_examples
    loss = (
        np.sum(np.logaddexp(0.0, -r_pos)) + np.sum(np.logaddexp(0.0, r_neg))
    ) / m
    up_pos = (expit(r_pos) - 1.0) / m
    up_neg = expit(r_neg) / m
    g_pos = twist.dre_logit_grads(batch.positives, batch.y, up_pos)
    g_neg = twist.dre_logit_grads(batch.negatives, batch.y, up_neg)
    grads = {k: g_pos[k] + g_neg[k] for k in g_pos}
    return float(loss), grads


def classification_accuracy(twist, batch: DREBatch) -> float:
    """Fraction of examples the twist classifies correctly (threshold 0)."""
    r_pos = twist.dre_logits(batch.positives, batch.y)
    r_neg = twist.dre_logits(batch.negatives, batch.y)
    correct = np.sum(r_pos > 0) + np.sum(r_neg < 0)
    return float(correct / batch.num_examples)


@dataclass(frozen=True)
class TwistTrainHistory:
    """Loss trace and (optional) parameter-error trace from twist training."""

    steps: np.ndarray
    losses: np.ndarray
    param_errors: np.ndarray | None


def train_twist(
    model: ModelSpec,
    twist,
    steps: int,
    rng: RngStream,
    lr: float = 1e-3,
    batch_size: int = 32,
    record_every: int = 100,
    reference_params: dict[str, np.ndarray] | None = None,
    lr_schedule=None,
    adam_state: AdamState | None = None,
) -> TwistTrainHistory:
    """Stochastic-gradient twist training on fresh model samples.

    Each step draws a new :class:`DREBatch` from the current model (no
    replay buffer, keeping the estimator unbiased for fixed model
    parameters) and applies one Adam update to ``twist.params``.

    Args:
        model: generative model to sample from.
        twist: parameterized twist exposing ``params`` / ``dre_logits`` /
            ``dre_logit_grads``; updated in place.
        steps: number of updates; 0 returns immediately with no change.
        rng: stream; each step uses an independent child stream.
        lr: Adam learning rate.
        batch_size: rollout pairs per step.
        record_every: thinning interval for the returned traces.
        reference_params: optional known-optimal parameters; when given,
            the history records max relative coefficient error per step.
        lr_schedule: optional ``step -> lr`` override.
        adam_state: optional warm-started optimizer state.

    Returns:
        Recorded loss / error traces.

    Raises:
        TrainingDiverged: on a non-finite loss, reporting the step.
    """
    state = adam_state if adam_state is not None else adam_init(twist.params, lr=lr)
    rec_steps: list[int] = []
    rec_losses: list[float] = []
    rec_errors: list[float] = []
    for k in range(steps):
        batch = sample_dre_batch(model, batch_size, rng.child(k))
        loss, grads = dre_loss_and_grad(twist, batch)
        if not np.isfinite(loss):
            raise TrainingDiverged(f"non-finite twist loss at step {k}")
        step_lr = lr_schedule(k) if lr_schedule is not None else None
        state, twist.params = adam_step(state, twist.params, grads, lr=step_lr)
        if k % record_every == 0 or k == steps - 1:
            rec_steps.append(k)
            rec_losses.append(loss)
            if reference_params is not None:
                rec_errors.append(_max_rel_error(twist.params, reference_params))
    return TwistTrainHistory(
        steps=np.asarray(rec_steps),
        losses=np.asarray(rec_losses),
        param_errors=np.asarray(rec_errors) if reference_params is not None else None,
    )


def _max_rel_error(params, reference) -> float:
    worst = 0.0
    for name, ref in reference.items():
        ref = np.asarray(ref, dtype=float)
        cur = np.asarray(params[name], dtype=float)
        scale = np.maximum(np.abs(ref), 1e-8)
        worst = max(worst, float(np.max(np.abs(cur - ref) / scale)))
    return worst
