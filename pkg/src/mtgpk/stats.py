"""One-pass mean/covariance accumulation with deterministic merging."""

from __future__ import annotations

import numpy as np


class MomentAccumulator:
    """Running count, mean and co-moment matrix of s-dimensional samples.

    Batches are folded in with the pairwise update of Chan, Golub and
    LeVeque, so partial accumulators built on separate workers can be merged
    afterwards. Merging in a fixed order gives bit-identical results no
    matter how many workers produced the parts.
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self.comoment = np.zeros((dim, dim))

    def update(self, batch) -> "MomentAccumulator":
        batch = np.asarray(batch, dtype=float).reshape(-1, self.dim)
        if len(batch) == 0:
            return self
        other = MomentAccumulator(self.dim)
        other.count = len(batch)
        other.mean = batch.mean(axis=0)
        centered = batch - other.mean
        other.comoment = centered.T @ centered
        return self.merge(other)

    def merge(self, other: "MomentAccumulator") -> "MomentAccumulator":
        if other.count == 0:
            return self
        if self.count == 0:
            self.count = other.count
            self.mean = other.mean.copy()
            self.comoment = other.comoment.copy()
            return self
        n = self.count + other.count
        delta = other.mean - self.mean
        self.comoment = self.comoment + other.comoment + np.outer(delta, delta) * (self.count * other.count / n)
        self.mean = self.mean + delta * (other.count / n)
        self.count = n
        return self

    @property
    def cov(self) -> np.ndarray:
        if self.count < 2:
            return np.full((self.dim, self.dim), np.nan)
        c = self.comoment / (self.count - 1)
        return 0.5 * (c + c.T)

    @property
    def std_error(self) -> np.ndarray:
        """Standard error of each entry of :attr:`mean`."""
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None) / self.count)
