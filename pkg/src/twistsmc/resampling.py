"""Categorical resampling: Walker alias tables and systematic draws.

The alias table costs O(K) to build and O(1) per draw, so multinomial
resampling of N particles over K categories runs in O(K + N) total.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import RngStream
from .weights import LogWeights

RESAMPLE_SCHEMES = ("multinomial-alias", "systematic")


@dataclass(frozen=True)
class AliasTable:
    """Walker alias table for a fixed categorical distribution.

    Attributes:
        accept: per-bin acceptance probability, shape ``(K,)``.
        alias: per-bin alternative category, shape ``(K,)``.
    """

    accept: np.ndarray
    alias: np.ndarray

    def draw(self, n: int, gen: np.random.Generator) -> np.ndarray:
        """Draw ``n`` iid category indices in O(1) each."""
        k = self.accept.shape[0]
        bins = gen.integers(0, k, size=n)
        keep = gen.random(n) < self.accept[bins]
        return np.where(keep, bins, self.alias[bins])


def alias_setup(probs: np.ndarray) -> AliasTable:
    """Build an alias table from a normalized probability vector in O(K).

    Uses the classic two-stack construction: bins with scaled mass below 1
    are topped up from bins above 1 until every bin is a binary mixture.
    """
    probs = np.asarray(probs, dtype=float)
    k = probs.shape[0]
    accept = probs * k
    alias = np.arange(k)
    smaller = [i for i in range(k) if accept[i] < 1.0]
    larger = [i for i in range(k) if accept[i] >= 1.0]
    while smaller and larger:
        small = smaller.pop()
        large = larger.pop()
        alias[small] = large
        accept[large] = accept[large] - (1.0 - accept[small])
        if accept[large] < 1.0:
            smaller.append(large)
        else:
            larger.append(large)
    # Leftovers are 1.0 up to rounding.
    for i in smaller:
        accept[i] = 1.0
    for i in larger:
        accept[i] = 1.0
    return AliasTable(accept=accept, alias=alias)


def systematic_indices(
    probs: np.ndarray, n: int, gen: np.random.Generator
) -> np.ndarray:
    """Low-variance stratified draw: one uniform offset, n evenly spaced points.

    Ties at bin boundaries resolve by stable left-to-right cumulative
    assignment, so output is deterministic given the generator state.
    """
    cum = np.cumsum(np.asarray(probs, dtype=float))
    cum[-1] = 1.0
    points = (gen.random() + np.arange(n)) / n
    return np.searchsorted(cum, points, side="right").clip(max=len(cum) - 1)


def resample_indices(
    weights: LogWeights,
    n: int,
    scheme: str,
    rng: RngStream | np.random.Generator,
) -> np.ndarray:
    """Draw ``n`` ancestor indices from a normalized weight vector.

    Args:
        weights: normalized weights over K categories.
        n: number of indices to draw.
        scheme: ``"multinomial-alias"`` for iid categorical draws via an
            alias table, or ``"systematic"`` for the stratified scheme.
        rng: stream or generator supplying the randomness.

    Returns:
        int array of shape ``(n,)`` with values in ``[0, K)``.
    """
    if scheme not in RESAMPLE_SCHEMES:
        raise ValueError(f"unknown resampling scheme {scheme!r}")
    gen = rng.generator() if isinstance(rng, RngStream) else rng
    if scheme == "multinomial-alias":
        return alias_setup(weights.normalized).draw(n, gen)
    return systematic_indices(weights.normalized, n, gen)
