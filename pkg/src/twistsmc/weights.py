"""Log-space weight arithmetic shared by every sampler in the library.

Importance weights over a length-T sequence are products of T factors and
underflow double precision long before T gets interesting, so weights only
ever exist here as log values. Normalization uses the max-shift form of
log-sum-exp; raw weights are never exponentiated directly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class DegenerateWeightsError(ValueError):
    """All weights are zero: every particle has log-weight -inf."""


@dataclass(frozen=True)
class LogWeights:
    """A weight vector in log space together with its normalization.

    Attributes:
        raw: log-weights in nats, shape ``(N,)``.
        normalized: probabilities summing to one, shape ``(N,)``.
        log_sum: ``logsumexp(raw)``.
    """

    raw: np.ndarray
    normalized: np.ndarray
    log_sum: float

    def __len__(self) -> int:
        return self.raw.shape[0]


def normalize_log_weights(raw: np.ndarray) -> LogWeights:
    """Normalize a vector of log-weights without leaving log space.

    Args:
        raw: non-empty vector of log-weights; entries may be ``-inf``
            (zero weight) but at least one entry must be finite.

    Returns:
        A :class:`LogWeights` with ``normalized[i] = exp(raw[i] - log_sum)``.

    Raises:
        DegenerateWeightsError: if every entry is ``-inf``.
        ValueError: if the vector is empty or contains NaN / ``+inf``.
    """
    raw = np.asarray(raw, dtype=float)
    if raw.ndim != 1 or raw.size == 0:
        raise ValueError("log-weights must be a non-empty 1-D vector")
    if np.isnan(raw).any() or np.isposinf(raw).any():
        raise ValueError("log-weights contain NaN or +inf entries")
    if not np.isfinite(raw).any():
        raise DegenerateWeightsError("degenerate weights: all log-weights are -inf")
    shift = np.max(raw)
    shifted = np.exp(raw - shift)
    total = shifted.sum()
    normalized = shifted / total
    log_sum = float(shift + np.log(total))
    return LogWeights(raw=raw, normalized=normalized, log_sum=log_sum)


def effective_sample_size(weights: LogWeights) -> float:
    """ESS of a normalized weight vector: ``1 / sum(w_i^2)``.

    N for uniform weights, 1 when a single particle carries all mass; the
    standard degeneracy statistic used to trigger resampling.
    """
    return float(1.0 / np.sum(weights.normalized**2))
