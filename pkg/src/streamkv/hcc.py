"""Hybrid cache compression: retain / merge / evict triage and key-space merging."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .core import LayerCache, StreamKVError

ZERO_NORM = 1e-12
# cosine similarities closer than this to the row maximum count as tied
TIE_TOL = 1e-12


class BudgetTooSmall(StreamKVError):
    pass


class NoMergeTargets(StreamKVError):
    pass


class MissingToken(StreamKVError):
    pass


class BudgetExceeded(StreamKVError):
    pass


@dataclass(frozen=True)
class TriageResult:
    """Disjoint retain/merge/evict index sets (sorted ascending).

    Indices refer to whatever vector was triaged until :meth:`remap` moves
    them into cache positions. ``assignment`` maps each merge index to its
    target index and is filled in after nearest-neighbour assignment.
    """

    retain: np.ndarray
    merge: np.ndarray
    evict: np.ndarray
    tau_merge: float
    tau_evict: float
    assignment: dict = field(default_factory=dict)
    demoted: int = 0

    def remap(self, positions) -> "TriageResult":
        pos = np.asarray(positions, dtype=np.int64)
        return replace(
            self,
            retain=pos[self.retain],
            merge=pos[self.merge],
            evict=pos[self.evict],
            assignment={int(pos[i]): int(pos[j]) for i, j in self.assignment.items()},
        )

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.retain), len(self.merge), len(self.evict)


def merge_count(merge_ratio: float, n_rest: int) -> int:
    """``ceil(merge_ratio * n_rest)`` on the ratio as written in decimal.

    Binary rounding would otherwise turn 0.4 * 5 into 3 and 0.7 * 10 into 8.
    """
    return math.ceil(Fraction(repr(float(merge_ratio))) * n_rest)


def descending_order(scores) -> np.ndarray:
    """Positions sorted by descending score, ties by lower position."""
    scores = np.asarray(scores, dtype=np.float64)
    return np.lexsort((np.arange(scores.size), -scores))


def triage(scores, protected_count: int, budget: int, merge_ratio: float) -> TriageResult:
    """Split the evictable tokens into retain / merge / evict sets.

    The ``budget - protected_count`` best tokens are retained; of the rest,
    the top ``ceil(merge_ratio * n_rest)`` are merged and the remainder
    evicted. The two thresholds are reported as the order statistics this
    split implies. ``budget == protected_count`` is allowed and retains
    nothing.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if budget < protected_count:
        raise BudgetTooSmall(f"budget {budget} < protected count {protected_count}")
    if not np.all(np.isfinite(scores)) or np.any(scores < 0):
        raise ValueError("triage scores must be finite and non-negative")
    order = descending_order(scores)
    n_retain = min(scores.size, budget - protected_count)
    rest = order[n_retain:]
    n_merge = merge_count(merge_ratio, rest.size)
    retain = np.sort(order[:n_retain])
    merge = np.sort(rest[:n_merge])
    evict = np.sort(rest[n_merge:])
    tau_evict = float(scores[retain].min()) if retain.size else math.inf
    tau_merge = float(scores[merge].min()) if merge.size else tau_evict
    return TriageResult(retain, merge, evict, tau_merge, tau_evict)


def cosine_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; rows with norm below 1e-12 score 0 against everything."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    ua = np.divide(a, na[:, None], out=np.zeros_like(a), where=na[:, None] >= ZERO_NORM)
    ub = np.divide(b, nb[:, None], out=np.zeros_like(b), where=nb[:, None] >= ZERO_NORM)
    return ua @ ub.T


def first_max(sims: np.ndarray) -> np.ndarray:
    """Per row, the lowest column whose value is within TIE_TOL of the row max."""
    best = sims.max(axis=1, keepdims=True)
    return np.argmax(sims >= best - TIE_TOL, axis=1)


def nn_assign(merge_keys, target_keys) -> np.ndarray:
    """Index of the most cosine-similar target for every merge key."""
    merge_keys = np.asarray(merge_keys, dtype=np.float64)
    target_keys = np.asarray(target_keys, dtype=np.float64)
    if merge_keys.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    if target_keys.shape[0] == 0:
        raise NoMergeTargets("no retained or protected token to merge into")
    if merge_keys.shape[1] != target_keys.shape[1]:
        raise ValueError("merge and target keys differ in dimension")
    return first_max(cosine_matrix(merge_keys, target_keys)).astype(np.int64)


def assign_targets(tri: TriageResult, keys: np.ndarray, protected_positions) -> TriageResult:
    """Attach merge targets (cache positions) to a triage already in cache positions.

    Targets are the retained and protected tokens in cache order. With no
    target at all, merge candidates are demoted to eviction.
    """
    targets = np.union1d(tri.retain, np.asarray(protected_positions, dtype=np.int64))
    if tri.merge.size == 0:
        return tri
    if targets.size == 0:
        return replace(
            tri,
            merge=np.zeros(0, dtype=np.int64),
            evict=np.union1d(tri.evict, tri.merge),
            demoted=tri.demoted + tri.merge.size,
        )
    picks = nn_assign(keys[tri.merge], keys[targets])
    assignment = {int(i): int(targets[p]) for i, p in zip(tri.merge, picks)}
    return replace(tri, assignment=assignment)


def fuse(
    cache: LayerCache, tri: TriageResult, enhanced_scores=None, *, order=None
) -> tuple[LayerCache, int]:
    """Apply a triage to ``cache``: merge candidates into their targets, drop the rest.

    Candidates are folded in one at a time, highest score first, each
    updating its target to the score-weighted mean and adding its score to
    the target's. ``order`` overrides that processing order (it must list
    the merge positions exactly once); the result only changes by rounding.
    Returns the compressed cache and the number of candidates skipped
    because both weights were zero (those are evicted instead).
    """
    n = len(cache)
    scores = cache.enhanced_scores if enhanced_scores is None else enhanced_scores
    weights = np.array(scores, dtype=np.float64)
    if weights.shape != (n,):
        raise ValueError("need one score per cache entry")
    for idx in (tri.retain, tri.merge, tri.evict):
        if idx.size and (idx.min() < 0 or idx.max() >= n):
            raise MissingToken("triage references a position outside the cache")
    missing = [int(i) for i in tri.merge if int(i) not in tri.assignment]
    if missing:
        raise MissingToken(f"merge candidates without a target: {missing}")
    gone = set(tri.merge.tolist()) | set(tri.evict.tolist())
    for j in tri.assignment.values():
        if not 0 <= j < n or j in gone:
            raise MissingToken(f"merge target {j} is not a surviving cache entry")

    keys = cache.keys.copy()
    values = cache.values.copy()
    absorbed = cache.absorbed.copy()
    skipped = 0
    if order is None:
        cand = tri.merge[descending_order(weights[tri.merge])]
    else:
        cand = np.asarray(order, dtype=np.int64)
        if sorted(cand.tolist()) != sorted(tri.merge.tolist()):
            raise ValueError("order must be a permutation of the merge positions")
    for i in cand:
        j = tri.assignment[int(i)]
        si, sj = weights[i], weights[j]
        total = sj + si
        if total == 0:
            skipped += 1
            continue
        keys[j] = (sj * keys[j] + si * keys[i]) / total
        values[j] = (sj * values[j] + si * values[i]) / total
        weights[j] = total
        absorbed[j] += 1 + absorbed[i]

    keep = np.ones(n, dtype=bool)
    keep[list(gone)] = False
    out = cache.take(np.flatnonzero(keep))
    out.keys = keys[keep]
    out.values = values[keep]
    out.enhanced_scores = weights[keep]
    out.absorbed = absorbed[keep]
    if len(out) > out.budget:
        raise BudgetExceeded(f"{len(out)} tokens left in a layer with budget {out.budget}")
    return out, skipped


@dataclass(frozen=True)
class LayerStats:
    n_evictable: int
    n_protected: int
    n_retain: int
    n_merge: int
    n_evict: int
    tau_merge: float
    tau_evict: float
    demoted: int
    zero_score_pairs: int
    targets_touched: int
    absorbed_total: int


def compress_layer(
    cache: LayerCache, triage_scores, merge_ratio: float, fusion_weights=None
) -> tuple[LayerCache, LayerStats, TriageResult]:
    """Full compression step for one layer.

    ``triage_scores`` has one entry per *evictable* (unprotected) token in
    cache order; ``fusion_weights`` has one per cache entry and defaults to
    the stored enhanced scores.
    """
    evictable = np.flatnonzero(~cache.protected)
    protected = np.flatnonzero(cache.protected)
    triage_scores = np.asarray(triage_scores, dtype=np.float64)
    if triage_scores.shape != evictable.shape:
        raise ValueError("need one triage score per evictable token")
    tri = triage(triage_scores, protected.size, cache.budget, merge_ratio).remap(evictable)
    tri = assign_targets(tri, cache.keys, protected)
    out, skipped = fuse(cache, tri, fusion_weights)
    touched = set(tri.assignment.values())
    stats = LayerStats(
        n_evictable=int(evictable.size),
        n_protected=int(protected.size),
        n_retain=len(tri.retain),
        n_merge=len(tri.merge) - skipped,
        n_evict=len(tri.evict) + skipped,
        tau_merge=tri.tau_merge,
        tau_evict=tri.tau_evict,
        demoted=tri.demoted + skipped,
        zero_score_pairs=skipped,
        targets_touched=len(touched),
        absorbed_total=int(out.absorbed.sum()),
    )
    return out, stats, tri
