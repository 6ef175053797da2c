"""Markovian state-space model abstraction.

A model is a bundle of per-step log-densities, samplers and (optionally)
analytic parameter-gradient hooks for the factorization

    p(x_{0:T-1}, y_{0:T-1}) = p(x_0) p(y_0 | x_0)
                              prod_{t>=1} p(x_t | x_{t-1}) p(y_t | x_t),

with all time indices 0-based. Per-step terms rather than a monolithic
joint are exposed because the wake-sleep gradient estimators accumulate
timestep-local contributions. Gradients enter through explicit hooks; the
library does not differentiate user models automatically.

All callables are vectorized over a leading particle/batch axis: latent
states have shape ``(N, dim_x)`` and per-step observations broadcast as
``(dim_y,)`` or ``(N, dim_y)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Protocol

import numpy as np

from .rng import RngStream

GradHook = Callable[
    [int, np.ndarray, np.ndarray | None, np.ndarray],
    dict[str, np.ndarray],
]


@dataclass(frozen=True)
class ModelSpec:
    """A state-space model as per-step densities, samplers and grad hooks.

    Attributes:
        dim_x: latent dimension.
        dim_y: observation dimension.
        horizon: number of timesteps T.
        log_init: ``x0 (N, dim_x) -> (N,)`` log p(x_0).
        log_trans: ``(t, x_t, x_prev) -> (N,)`` log p(x_t | x_{t-1}), t >= 1.
        log_obs: ``(t, y_t, x_t) -> (N,)`` log p(y_t | x_t).
        sample_init: ``(n, gen) -> (n, dim_x)``.
        sample_trans: ``(t, x_prev, gen) -> (N, dim_x)``.
        sample_obs: ``(t, x_t, gen) -> (N, dim_y)``.
        theta_grads: optional hook ``(t, x_t, x_prev, y_t) -> {name: (N, ...)}``
            returning per-particle gradients of
            ``log p(x_t, y_t | x_{t-1})`` with respect to each named model
            parameter (at t = 0, of ``log p(x_0) + log p(y_0 | x_0)`` with
            ``x_prev = None``).
    """

    dim_x: int
    dim_y: int
    horizon: int
    log_init: Callable[[np.ndarray], np.ndarray]
    log_trans: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    log_obs: Callable[[int, np.ndarray, np.ndarray], np.ndarray]
    sample_init: Callable[[int, np.random.Generator], np.ndarray]
    sample_trans: Callable[[int, np.ndarray, np.random.Generator], np.ndarray]
    sample_obs: Callable[[int, np.ndarray, np.random.Generator], np.ndarray]
    theta_grads: GradHook | None = None

    def sample_joint(
        self, n: int, rng: RngStream | np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``n`` joint trajectories; returns ``(x, y)`` with shapes
        ``(n, T, dim_x)`` and ``(n, T, dim_y)``."""
        gen = _as_generator(rng)
        x = np.empty((n, self.horizon, self.dim_x))
        y = np.empty((n, self.horizon, self.dim_y))
        x[:, 0] = self.sample_init(n, gen)
        y[:, 0] = self.sample_obs(0, x[:, 0], gen)
        for t in range(1, self.horizon):
            x[:, t] = self.sample_trans(t, x[:, t - 1], gen)
            y[:, t] = self.sample_obs(t, x[:, t], gen)
        return x, y

    def sample_prior(
        self, n: int, rng: RngStream | np.random.Generator
    ) -> np.ndarray:
        """Draw ``n`` latent trajectories from the prior, shape ``(n, T, dim_x)``."""
        gen = _as_generator(rng)
        x = np.empty((n, self.horizon, self.dim_x))
        x[:, 0] = self.sample_init(n, gen)
        for t in range(1, self.horizon):
            x[:, t] = self.sample_trans(t, x[:, t - 1], gen)
        return x

    def log_joint(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Sum of per-step terms over whole trajectories.

        Args:
            x: latents, shape ``(B, T, dim_x)`` (or ``(T, dim_x)``).
            y: observations, shape ``(B, T, dim_y)`` (or ``(T, dim_y)``).

        Returns:
            log p(x, y) per trajectory, shape ``(B,)`` (scalar if unbatched).
        """
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
            y = y[None]
        total = self.log_init(x[:, 0]) + self.log_obs(0, y[:, 0], x[:, 0])
        for t in range(1, self.horizon):
            total = total + self.log_trans(t, x[:, t], x[:, t - 1])
            total = total + self.log_obs(t, y[:, t], x[:, t])
        return float(total[0]) if squeeze else total


class Proposal(Protocol):
    """Per-timestep proposal q(x_t | x_{t-1}, ...) with log-density gradients.

    ``params`` is the (possibly empty) store of learnable parameters; the
    wake-sleep proposal update only needs ``grad log q``, so no
    reparameterization is ever required and discrete components are fine.
    """

    params: dict[str, np.ndarray]

    def sample(
        self, t: int, x_prev: np.ndarray | None, n: int, gen: np.random.Generator
    ) -> np.ndarray:
        """Draw ``n`` proposals for step ``t`` (``x_prev`` is None at t = 0)."""
        ...

    def log_prob(
        self, t: int, x: np.ndarray, x_prev: np.ndarray | None
    ) -> np.ndarray:
        """log q(x_t | x_{t-1}) per particle, shape ``(N,)``."""
        ...

    def param_grads(
        self, t: int, x: np.ndarray, x_prev: np.ndarray | None
    ) -> dict[str, np.ndarray]:
        """Per-particle ``grad_phi log q`` keyed like ``params``; each array
        has shape ``(N,) + params[name].shape``."""
        ...


class BootstrapProposal:
    """Proposes from the model transition; log q cancels the prior term.

    Has no learnable parameters, so filtering SMC with this proposal is a
    bootstrap particle filter.
    """

    def __init__(self, model: ModelSpec):
        self.model = model
        self.params: dict[str, np.ndarray] = {}

    def sample(self, t, x_prev, n, gen):
        if t == 0:
            return self.model.sample_init(n, gen)
        return self.model.sample_trans(t, x_prev, gen)

    def log_prob(self, t, x, x_prev):
        if t == 0:
            return self.model.log_init(x)
        return self.model.log_trans(t, x, x_prev)

    def param_grads(self, t, x, x_prev):
        return {}


def _as_generator(
    rng: RngStream | np.random.Generator,
) -> np.random.Generator:
    if isinstance(rng, RngStream):
        return rng.generator()
    return rng


def check_factorization(
    model: ModelSpec,
    monolithic_log_joint: Callable[[np.ndarray, np.ndarray], float],
    rng: RngStream,
    n: int = 8,
    atol: float = 1e-9,
) -> None:
    """Assert the per-step factorization matches an independent joint density.

    Samples ``n`` trajectories and compares :meth:`ModelSpec.log_joint`
    against ``monolithic_log_joint`` on each; raises ``AssertionError`` on
    disagreement beyond ``atol``.
    """
    x, y = model.sample_joint(n, rng)
    for b in range(n):
        lhs = model.log_joint(x[b], y[b])
        rhs = float(monolithic_log_joint(x[b], y[b]))
        if not np.isclose(lhs, rhs, rtol=0.0, atol=atol):
            raise AssertionError(
                f"factorization mismatch on trajectory {b}: {lhs} vs {rhs}"
            )


ParamStore = Mapping[str, np.ndarray]
