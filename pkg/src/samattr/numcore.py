"""Deterministic numeric primitives: norms, dual exponents, batch schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, InvalidInputError


def p_norm(v: np.ndarray, p: float) -> float:
    """Return the l_p norm of a flat vector, with p = inf meaning max-norm.

    Raises InvalidInputError on non-finite entries or p < 1.
    """
    v = np.asarray(v, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise InvalidInputError("p_norm: vector has non-finite entries")
    if p < 1.0:
        raise InvalidInputError(f"p_norm: p must be >= 1, got {p}")
    if v.size == 0:
        return 0.0
    a = np.abs(v)
    if math.isinf(p):
        return float(a.max())
    if p == 1.0:
        return float(a.sum())
    if p == 2.0:
        return float(np.sqrt(np.dot(v, v)))
    # Rescale by the max to avoid overflow for large p.
    m = float(a.max())
    if m == 0.0:
        return 0.0
    return float(m * np.power(np.power(a / m, p).sum(), 1.0 / p))


def dual_exponent(p: float) -> float:
    """Return q with 1/p + 1/q = 1, for p strictly inside (1, inf)."""
    if math.isinf(p) or p <= 1.0:
        raise InvalidInputError(f"dual_exponent: p must lie in (1, inf), got {p}")
    return p / (p - 1.0)


@dataclass
class BatchSchedule:
    """Per-step index sets used by the training loop.

    steps[t] is a sorted int64 array of exactly batch_size distinct indices
    into 0..n-1. The schedule is a pure function of (n, batch_size, T, seed,
    epoch_shuffled), so identical inputs give byte-identical schedules.
    """

    steps: list[np.ndarray] = field(default_factory=list)
    batch_size: int = 0
    seed: int = 0

    @property
    def num_steps(self) -> int:
        return len(self.steps)


def sample_batches(
    n: int,
    b: int,
    T: int,
    seed: int,
    epoch_shuffled: bool = False,
) -> BatchSchedule:
    """Draw T batches of b distinct indices from 0..n-1.

    Default mode draws each step independently without replacement within
    the step (plain SGD). epoch_shuffled instead walks seeded permutations
    of the full index range, reshuffling at each epoch boundary.
    """
    if n < 1 or b < 1 or T < 1:
        raise ConfigError(f"sample_batches: need n,b,T >= 1, got n={n} b={b} T={T}")
    if b > n:
        raise ConfigError(f"sample_batches: batch size {b} exceeds dataset size {n}")
    rng = np.random.default_rng(seed)
    steps: list[np.ndarray] = []
    if epoch_shuffled:
        pool: list[int] = []
        for _ in range(T):
            while len(pool) < b:
                pool.extend(rng.permutation(n).tolist())
            steps.append(np.sort(np.asarray(pool[:b], dtype=np.int64)))
            del pool[:b]
    else:
        for _ in range(T):
            if b == n:
                steps.append(np.arange(n, dtype=np.int64))
            else:
                steps.append(np.sort(rng.choice(n, size=b, replace=False).astype(np.int64)))
    return BatchSchedule(steps=steps, batch_size=b, seed=seed)
