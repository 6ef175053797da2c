"""Adam optimizer over named parameter stores.

Parameters and gradients are dicts mapping names to arrays. Updates are
functional: each step returns a new state and a new parameter dict, which
keeps training loops replayable and checkpoints trivial.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np


@dataclass(frozen=True)
class AdamState:
    """Moment accumulators and hyperparameters for one parameter store."""

    lr: float
    beta1: float
    beta2: float
    eps: float
    step: int
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]


def adam_init(
    params: Mapping[str, np.ndarray],
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Zero-initialized Adam state shaped like ``params``."""
    return AdamState(
        lr=lr,
        beta1=beta1,
        beta2=beta2,
        eps=eps,
        step=0,
        m={k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()},
        v={k: np.zeros_like(np.asarray(v, dtype=float)) for k, v in params.items()},
    )


def adam_step(
    state: AdamState,
    params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    lr: float | None = None,
) -> tuple[AdamState, dict[str, np.ndarray]]:
    """One bias-corrected Adam descent step.

    Args:
        state: current moments; ``state.step`` increments by exactly one.
        params: current parameter values.
        grads: loss gradients, same keys and shapes as ``params``.
        lr: optional override of the stored learning rate for this step
            (supports schedules without rebuilding state).

    Returns:
        ``(new_state, new_params)``.

    Raises:
        ValueError: on shape mismatch or non-finite gradient entries,
            naming the offending parameter.
    """
    t = state.step + 1
    rate = state.lr if lr is None else lr
    new_m = {}
    new_v = {}
    new_params = {}
    for name, p in params.items():
        if name not in grads:
            raise ValueError(f"missing gradient for parameter {name!r}")
        g = np.asarray(grads[name], dtype=float)
        p = np.asarray(p, dtype=float)
        if g.shape != p.shape:
            raise ValueError(
                f"gradient shape {g.shape} does not match parameter "
                f"{name!r} of shape {p.shape}"
            )
        if not np.all(np.isfinite(g)):
            raise ValueError(f"non-finite gradient for parameter {name!r}")
        m = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * g**2
        m_hat = m / (1.0 - state.beta1**t)
        v_hat = v / (1.0 - state.beta2**t)
        new_params[name] = p - rate * m_hat / (np.sqrt(v_hat) + state.eps)
        new_m[name] = m
        new_v[name] = v
    return replace(state, step=t, m=new_m, v=new_v), new_params
