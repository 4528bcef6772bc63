"""Per-frame cache compression across all layers.

For every layer of an incoming frame:

1. take the frame's raw feed-forward residual scores,
2. enhance them with cross-layer rank consistency,
3. smooth them spatially over the patch grid,
4. blend with key diversity and run retain/merge/evict triage over every
   unprotected cached token (old and new alike),

and once all layers are done, refresh the set of anchor tokens that are
exempt from triage.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Protocol, Sequence

import numpy as np

from . import clces, hcc
from .core import (
    DimensionMismatch,
    FrameLayout,
    LayerCache,
    PipelineConfig,
    StreamKVError,
    layer_budgets,
)
from .scoresrc import FrameActivations


class GridMismatch(StreamKVError):
    pass


class PipelineError(StreamKVError):
    """A module error raised while processing a frame, with frame/layer context."""

    def __init__(self, frame: int, layer: int | None, cause: Exception):
        self.frame = frame
        self.layer = layer
        self.cause = cause
        where = f"frame {frame}" + ("" if layer is None else f", layer {layer}")
        super().__init__(f"{where}: {type(cause).__name__}: {cause}")


# --------------------------------------------------------------- smoothing

def gaussian_kernel3() -> np.ndarray:
    g = np.exp(-0.5 * np.array([-1.0, 0.0, 1.0]) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


_KERNEL = gaussian_kernel3()


def gaussian_smooth(scores, layout: FrameLayout, alpha: float) -> np.ndarray:
    """Blend patch scores with their 3x3 Gaussian neighbourhood mean.

    Patch scores become ``(1 - alpha) * s + alpha * (G * s)`` with edge
    replication at the grid border; camera and register scores pass through.
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if scores.shape != (len(layout),):
        raise GridMismatch(f"{scores.size} scores for a {len(layout)}-token layout")
    rows, cols = layout.shape
    patch = layout.patch_mask
    pos = layout.grid[patch]
    if patch.sum() != rows * cols or np.unique(pos[:, 0] * cols + pos[:, 1]).size != rows * cols:
        raise GridMismatch("patch tokens do not cover the grid one-to-one")
    out = scores.copy()
    if alpha == 0.0:
        return out
    field_ = np.empty((rows, cols))
    field_[pos[:, 0], pos[:, 1]] = scores[patch]
    padded = np.pad(field_, 1, mode="edge")
    blurred = np.zeros_like(field_)
    for dr in range(3):
        for dc in range(3):
            blurred += _KERNEL[dr, dc] * padded[dr:dr + rows, dc:dc + cols]
    mixed = (1.0 - alpha) * field_ + alpha * blurred
    out[patch] = mixed[pos[:, 0], pos[:, 1]]
    return out


# ----------------------------------------------------------- hybrid score

def minmax(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return x.copy()
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full_like(x, 0.5)
    return (x - lo) / (hi - lo)


def key_diversity(keys: np.ndarray, reference_keys: np.ndarray) -> np.ndarray:
    """``1 - max cosine`` of each key against a reference set (1 if the set is empty)."""
    if len(reference_keys) == 0:
        return np.ones(len(keys))
    if len(keys) == 0:
        return np.zeros(0)
    return 1.0 - hcc.cosine_matrix(keys, reference_keys).max(axis=1)


def hybrid_score(activation, keys, retained_keys, beta: float) -> np.ndarray:
    """``beta * norm(activation) + (1 - beta) * norm(diversity)`` over the evictable set."""
    if not 0.0 <= beta <= 1.0:
        raise ValueError("beta must lie in [0, 1]")
    act = minmax(activation)
    if beta == 1.0:
        return act
    div = minmax(key_diversity(np.asarray(keys, dtype=np.float64), np.asarray(retained_keys)))
    return beta * act + (1.0 - beta) * div


# ------------------------------------------------------------ protection

class ProtectionPolicy(Protocol):
    def __call__(
        self, cache: LayerCache, initial_ids: frozenset, cfg: PipelineConfig
    ) -> frozenset: ...


def self_diversity(keys: np.ndarray) -> np.ndarray:
    """``1 - max cosine`` of each key against every *other* key in the set."""
    n = len(keys)
    if n < 2:
        return np.ones(n)
    sims = hcc.cosine_matrix(keys, keys)
    np.fill_diagonal(sims, -np.inf)
    return 1.0 - sims.max(axis=1)


def select_historical_anchors(
    token_ids, frames, diversity, eta: float, tau: float, kmax: int
) -> list[int]:
    """Pick ``floor(eta * n)`` high-diversity tokens spanning at most ``kmax`` frames.

    Candidates are visited by descending diversity (ties: lower token id).
    A candidate below ``tau`` ends the scan; one from a new frame is skipped
    once ``kmax`` frames are already represented.
    """
    token_ids = np.asarray(token_ids)
    quota = math.floor(eta * token_ids.size)
    chosen: list[int] = []
    frames_used: set[int] = set()
    if quota == 0 or kmax == 0:
        return chosen
    order = np.lexsort((token_ids, -np.asarray(diversity)))
    for i in order:
        if len(chosen) == quota or diversity[i] < tau:
            break
        f = int(frames[i])
        if f not in frames_used:
            if len(frames_used) == kmax:
                continue
            frames_used.add(f)
        chosen.append(int(token_ids[i]))
    return chosen


def simplified_dap(cache: LayerCache, initial_ids: frozenset, cfg: PipelineConfig) -> frozenset:
    """Default anchor policy: all initial-frame tokens plus a few diverse historical ones.

    This is a deliberately small stand-in for dynamic anchor protection; swap
    it by passing another callable as ``protection`` to :func:`process_frame`.
    """
    init_mask = np.isin(cache.token_ids, np.fromiter(initial_ids, dtype=np.int64))
    hist = np.flatnonzero(~init_mask)
    anchors = set(int(i) for i in cache.token_ids[init_mask])
    if hist.size and cfg.dap_eta > 0:
        div = self_diversity(cache.keys)[hist]
        anchors.update(
            select_historical_anchors(
                cache.token_ids[hist], cache.frame_index[hist], div,
                cfg.dap_eta, cfg.dap_tau, cfg.dap_kmax,
            )
        )
    return frozenset(anchors)


# ------------------------------------------------------------------ state

@dataclass(frozen=True)
class StreamState:
    caches: tuple[LayerCache, ...]
    protected: tuple[frozenset, ...]  # per layer
    initial_ids: frozenset = frozenset()
    frame_counter: int = 0
    next_token_id: int = 0
    rank_window: clces.RankWindow | None = None
    diagnostics: tuple = ()

    @classmethod
    def initial(cls, cfg: PipelineConfig) -> "StreamState":
        caches = tuple(
            LayerCache(layer, budget, cfg.head_dim)
            for layer, budget in enumerate(layer_budgets(cfg))
        )
        return cls(caches=caches, protected=tuple(frozenset() for _ in caches))

    @property
    def protected_ids(self) -> frozenset:
        return frozenset().union(*self.protected)

    @property
    def total_cached(self) -> int:
        return sum(len(c) for c in self.caches)


def dap_protect(
    state: StreamState, cfg: PipelineConfig, policy: ProtectionPolicy = simplified_dap
) -> tuple[frozenset, ...]:
    """Per-layer protected token ids for the current caches.

    Requires at least one processed frame (that is where the initial-frame
    anchors come from).
    """
    if state.frame_counter == 0:
        raise StreamKVError("anchor protection needs frame 0 to be processed first")
    return tuple(policy(c, state.initial_ids, cfg) for c in state.caches)


@dataclass(frozen=True)
class LayerDiagnostics:
    layer: int
    cache_size: int
    n_evictable: int
    n_retain: int
    n_merge: int
    n_evict: int
    n_protected: int
    mean_consistency: float
    reward_dispersion: float
    merge_demotions: int
    zero_score_pairs: int
    tau_merge: float
    tau_evict: float
    absorbed_total: int


@dataclass(frozen=True)
class FrameDiagnostics:
    frame: int
    layers: tuple[LayerDiagnostics, ...]
    protected_after: tuple[int, ...] = field(default=())


def _check_activations(acts: Sequence[FrameActivations], state: StreamState, cfg: PipelineConfig):
    if len(acts) != cfg.num_layers:
        raise DimensionMismatch(f"{len(acts)} layer activations for {cfg.num_layers} layers")
    for layer, a in enumerate(acts):
        if a.layer_index != layer or a.frame_index != state.frame_counter:
            raise DimensionMismatch(
                f"activation tagged (frame {a.frame_index}, layer {a.layer_index}), "
                f"expected (frame {state.frame_counter}, layer {layer})"
            )
        if a.keys.shape != (cfg.tokens_per_frame, cfg.head_dim):
            raise DimensionMismatch(
                f"layer {layer} keys {a.keys.shape}, expected ({cfg.tokens_per_frame}, {cfg.head_dim})"
            )


def resolve_threads(threads: int | None = None) -> int:
    if threads is None:
        threads = int(os.environ.get("STREAMKV_THREADS", "1") or 1)
    if threads <= 0:
        threads = os.cpu_count() or 1
    return threads


def process_frame(
    state: StreamState,
    acts: Sequence[FrameActivations],
    cfg: PipelineConfig,
    *,
    protection: ProtectionPolicy = simplified_dap,
    threads: int | None = 1,
) -> StreamState:
    """Fold one frame into the per-layer caches and return the new state.

    ``state`` is never modified; if anything fails the caller still holds
    the pre-frame state. Errors are re-raised as :class:`PipelineError`.
    """
    t = state.frame_counter
    try:
        _check_activations(acts, state, cfg)
    except StreamKVError as exc:
        raise PipelineError(t, None, exc) from exc
    layout = FrameLayout.for_config(cfg)
    m = cfg.tokens_per_frame
    ids = np.arange(state.next_token_id, state.next_token_id + m, dtype=np.int64)

    # cross-layer scoring is sequential in depth; the window restarts every frame
    window = clces.RankWindow(cfg.window_size)
    enhanced, cons = [], []
    for layer, a in enumerate(acts):
        try:
            window.push(clces.normalize_ranks(clces.compute_ranks(a.raw_scores)))
            report = clces.consistency(window)
            enhanced.append(clces.enhance_scores(a.raw_scores, report.consistency, cfg.consistency_weight))
            cons.append(report.consistency)
        except StreamKVError as exc:
            raise PipelineError(t, layer, exc) from exc

    def compress(layer: int):
        try:
            a = acts[layer]
            fresh = LayerCache(
                layer, state.caches[layer].budget, cfg.head_dim,
                token_ids=ids, frame_index=np.full(m, t), kinds=layout.kinds,
                grid=layout.grid, keys=a.keys, values=a.values,
                raw_scores=a.raw_scores, enhanced_scores=enhanced[layer],
            )
            cache = state.caches[layer].extend(fresh).with_protection(state.protected[layer])
            activation = cache.enhanced_scores.copy()
            activation[-m:] = gaussian_smooth(enhanced[layer], layout, cfg.smoothing_alpha)
            evictable = ~cache.protected
            scores = hybrid_score(
                activation[evictable], cache.keys[evictable], cache.keys[cache.protected], cfg.hybrid_beta
            )
            out, stats, _ = hcc.compress_layer(cache, scores, cfg.merge_ratio)
            out.check_invariants()
            return out, stats
        except (StreamKVError, ValueError, AssertionError) as exc:
            raise PipelineError(t, layer, exc) from exc

    n = resolve_threads(threads)
    if n > 1 and cfg.num_layers > 1:
        with ThreadPoolExecutor(max_workers=min(n, cfg.num_layers)) as pool:
            results = list(pool.map(compress, range(cfg.num_layers)))
    else:
        results = [compress(layer) for layer in range(cfg.num_layers)]

    initial = frozenset(int(i) for i in ids) if t == 0 else state.initial_ids
    caches, protected, layer_diags = [], [], []
    for layer, (cache, stats) in enumerate(results):
        try:
            anchors = protection(cache, initial, cfg)
        except Exception as exc:
            raise PipelineError(t, layer, exc) from exc
        present = set(cache.token_ids.tolist())
        anchors = frozenset(a for a in anchors if a in present)
        cache = cache.with_protection(anchors)
        caches.append(cache)
        protected.append(anchors)
        c = cons[layer]
        layer_diags.append(
            LayerDiagnostics(
                layer=layer,
                cache_size=len(cache),
                n_evictable=stats.n_evictable,
                n_retain=stats.n_retain,
                n_merge=stats.n_merge,
                n_evict=stats.n_evict,
                n_protected=stats.n_protected,
                mean_consistency=float(c.mean()),
                reward_dispersion=float(np.std(cfg.consistency_weight * c)),
                merge_demotions=stats.demoted,
                zero_score_pairs=stats.zero_score_pairs,
                tau_merge=stats.tau_merge,
                tau_evict=stats.tau_evict,
                absorbed_total=stats.absorbed_total,
            )
        )
    diag = FrameDiagnostics(frame=t, layers=tuple(layer_diags), protected_after=tuple(len(p) for p in protected))
    return replace(
        state,
        caches=tuple(caches),
        protected=tuple(protected),
        initial_ids=initial,
        frame_counter=t + 1,
        next_token_id=state.next_token_id + m,
        rank_window=window,
        diagnostics=state.diagnostics + (diag,),
    )


def run_stream(
    frames, cfg: PipelineConfig, *, state: StreamState | None = None,
    protection: ProtectionPolicy = simplified_dap, threads: int | None = 1,
    on_frame: Callable[[StreamState], None] | None = None,
) -> StreamState:
    """Process an iterable of per-frame activation lists from a fresh (or given) state."""
    state = StreamState.initial(cfg) if state is None else state
    for acts in frames:
        state = process_frame(state, acts, cfg, protection=protection, threads=threads)
        if on_frame is not None:
            on_frame(state)
    return state
