"""Cross-layer consistency-enhanced scoring.

A token's raw score at one layer is noisy. Instead of trusting it alone, we
track where the token *ranks* among its frame peers over the last ``W``
layers. Tokens whose normalised rank barely moves get a multiplicative
reward; tokens whose rank jumps around like a uniform random variable get
none.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .core import DimensionMismatch, StreamKVError

SQRT12 = math.sqrt(12.0)


class EmptyInput(StreamKVError):
    pass


class EmptyWindow(StreamKVError):
    pass


class NegativeInput(StreamKVError):
    pass


def compute_ranks(scores) -> np.ndarray:
    """Ascending ranks 0..N-1; equal scores rank by position (stable)."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 1 or scores.size == 0:
        raise EmptyInput("need a non-empty 1-D score vector")
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.int64)
    ranks[order] = np.arange(scores.size)
    return ranks


def normalize_ranks(ranks) -> np.ndarray:
    ranks = np.asarray(ranks)
    n = ranks.size
    if n == 1:
        return np.array([0.5])
    return ranks.astype(np.float64) / (n - 1)


@dataclass
class RankWindow:
    """Ring buffer of the last ``capacity`` normalised-rank columns of one frame."""

    capacity: int

    def __post_init__(self):
        if self.capacity < 1:
            raise ValueError("window capacity must be >= 1")
        self._cols: deque[np.ndarray] = deque(maxlen=self.capacity)

    @property
    def filled(self) -> int:
        return len(self._cols)

    @property
    def width(self) -> int | None:
        """Token count N of the stored columns (None while empty)."""
        return self._cols[0].size if self._cols else None

    @property
    def columns(self) -> np.ndarray:
        """Stored columns oldest-first as an (N, filled) matrix."""
        if not self._cols:
            return np.zeros((0, 0))
        return np.stack(self._cols, axis=1)

    def push(self, normalized_ranks) -> "RankWindow":
        col = np.array(normalized_ranks, dtype=np.float64).reshape(-1)
        if self._cols and col.size != self.width:
            raise DimensionMismatch(f"column of length {col.size} into window of width {self.width}")
        if np.any((col < 0) | (col > 1)):
            raise ValueError("normalised ranks must lie in [0, 1]")
        self._cols.append(col)
        return self

    def reset(self) -> "RankWindow":
        self._cols.clear()
        return self


def push_layer(window: RankWindow, normalized_ranks) -> RankWindow:
    return window.push(normalized_ranks)


def reset_window(window: RankWindow) -> RankWindow:
    return window.reset()


@dataclass(frozen=True)
class ConsistencyReport:
    mean_ranks: np.ndarray
    std_ranks: np.ndarray
    consistency: np.ndarray


def consistency(window: RankWindow) -> ConsistencyReport:
    """Per-token rank stability over the filled part of the window.

    Uses the sample standard deviation; with a single column there is no
    variance estimate: ``std_ranks`` is NaN and every token gets zero
    consistency.
    """
    if window.filled == 0:
        raise EmptyWindow("consistency of an empty window")
    cols = window.columns
    mu = cols.mean(axis=1)
    if window.filled < 2:
        n = cols.shape[0]
        return ConsistencyReport(mu, np.full(n, np.nan), np.zeros(n))
    sigma = cols.std(axis=1, ddof=1)
    # constant rows must report exactly zero spread, not rounding residue
    sigma[cols.max(axis=1) == cols.min(axis=1)] = 0.0
    cons = np.maximum(0.0, 1.0 - sigma * SQRT12)
    return ConsistencyReport(mu, sigma, cons)


def enhance_scores(raw, cons, lam: float) -> np.ndarray:
    """``raw * (1 + lam * cons)``, elementwise."""
    raw = np.asarray(raw, dtype=np.float64)
    cons = np.asarray(cons, dtype=np.float64)
    if raw.shape != cons.shape:
        raise DimensionMismatch(f"raw {raw.shape} vs consistency {cons.shape}")
    if lam < 0 or np.any(raw < 0) or np.any(cons < 0):
        raise NegativeInput("raw scores, consistency and lambda must be non-negative")
    if lam == 0:
        return raw.copy()
    return raw * (1.0 + lam * cons)
