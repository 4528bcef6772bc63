"""Slow, independent re-implementations used to check the fast paths.

Nothing here imports the code it verifies: each oracle re-derives its
result from the defining formula with plain loops.
"""

from __future__ import annotations

import math
from fractions import Fraction
from itertools import combinations, product

import numpy as np

from ..core import FrameLayout, PipelineConfig, TokenKind, layer_budgets

_ZERO = 1e-12
_TIE = 1e-12


def oracle_rank(scores) -> list[int]:
    """Rank = #strictly smaller + #equal with a lower index, by full pairwise comparison."""
    s = np.asarray(scores, dtype=np.float64)
    idx = np.arange(s.size)
    below = (s[None, :] < s[:, None]) | ((s[None, :] == s[:, None]) & (idx[None, :] < idx[:, None]))
    return below.sum(axis=1).tolist()


def oracle_cosine(a, b) -> float:
    na = math.sqrt(sum(float(x) * float(x) for x in a))
    nb = math.sqrt(sum(float(x) * float(x) for x in b))
    if na < _ZERO or nb < _ZERO:
        return 0.0
    return sum(float(x) * float(y) for x, y in zip(a, b)) / (na * nb)


def oracle_nn(merge_keys, target_keys) -> list[int]:
    """Brute-force argmax cosine; near-ties (1e-12) go to the lowest target index."""
    out = []
    for k in merge_keys:
        sims = [oracle_cosine(k, t) for t in target_keys]
        best = max(sims)
        out.append(next(j for j, s in enumerate(sims) if s >= best - _TIE))
    return out


def oracle_batch_merge(keys, values, scores):
    """Closed-form score-weighted mean of a merge group and its total score."""
    w = [float(s) for s in scores]
    total = math.fsum(w)
    k = np.array(keys, dtype=np.float64)
    v = np.array(values, dtype=np.float64)
    fused_k = [math.fsum(w[i] * k[i, c] for i in range(len(w))) / total for c in range(k.shape[1])]
    fused_v = [math.fsum(w[i] * v[i, c] for i in range(len(w))) / total for c in range(v.shape[1])]
    return np.array(fused_k), np.array(fused_v), total


def _ln(x, gain, bias, eps=1e-5):
    n = len(x)
    mu = sum(x) / n
    var = sum((xi - mu) ** 2 for xi in x) / n
    return [(xi - mu) / math.sqrt(var + eps) * g + b for xi, g, b in zip(x, gain, bias)]


def _gelu(x):
    return 0.5 * x * (1.0 + math.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x**3)))


def _vecmat(x, m):
    return [sum(x[i] * m[i][j] for i in range(len(x))) for j in range(len(m[0]))]


def oracle_ffn_score(h, params) -> float:
    """Straight-line evaluation of ``|| lambda2 * W2 gelu(W1 LN(h)) ||``."""
    h = [float(x) for x in h]
    normed = _ln(h, list(params.ln_gain), list(params.ln_bias))
    inner = [_gelu(z) for z in _vecmat(normed, params.ffn_w1.tolist())]
    out = _vecmat(inner, params.ffn_w2.tolist())
    return math.sqrt(sum((params.lambda2 * o) ** 2 for o in out))


def oracle_dense_attention(frame_hidden, cached_keys, cached_values, params) -> dict:
    """Dense attention of the frame over an explicit list of cached and frame tokens."""
    H = [[float(x) for x in row] for row in frame_hidden]
    wq, wk, wv, wo = (params.wq.tolist(), params.wk.tolist(), params.wv.tolist(), params.wo.tolist())
    q = [_vecmat(h, wq) for h in H]
    k = [_vecmat(h, wk) for h in H]
    v = [_vecmat(h, wv) for h in H]
    all_k = [list(map(float, r)) for r in cached_keys] + k
    all_v = [list(map(float, r)) for r in cached_values] + v
    d = len(k[0])
    weights, hidden = [], []
    for i, qi in enumerate(q):
        logits = [sum(a * b for a, b in zip(qi, kj)) / math.sqrt(d) for kj in all_k]
        top = max(logits)
        e = [math.exp(z - top) for z in logits]
        z = sum(e)
        w = [x / z for x in e]
        weights.append(w)
        attn = [sum(w[j] * all_v[j][c] for j in range(len(w))) for c in range(d)]
        proj = _vecmat(attn, wo)
        hidden.append([H[i][c] + proj[c] for c in range(len(proj))])
    scores = [oracle_ffn_score(h, params) for h in hidden]
    return {
        "hidden": np.array(hidden),
        "keys": np.array(k),
        "values": np.array(v),
        "raw_scores": np.array(scores),
        "weights": np.array(weights),
    }


def oracle_uniform_null(window: int, samples: int, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo mean and standard error of ``max(0, 1 - sd*sqrt(12))`` for iid U(0,1)."""
    rng = np.random.default_rng(seed)
    u = rng.random((samples, window))
    mean = u.sum(axis=1) / window
    var = ((u - mean[:, None]) ** 2).sum(axis=1) / (window - 1)
    cons = np.maximum(0.0, 1.0 - np.sqrt(var) * math.sqrt(12.0))
    return float(cons.mean()), float(cons.std(ddof=1) / math.sqrt(samples))


def oracle_consistency(ranks_row) -> float:
    r = [float(x) for x in ranks_row]
    w = len(r)
    if w < 2:
        return 0.0
    mu = sum(r) / w
    sd = math.sqrt(sum((x - mu) ** 2 for x in r) / (w - 1))
    return max(0.0, 1.0 - sd * math.sqrt(12.0))


def oracle_smooth(scores, kinds, grid, rows: int, cols: int, alpha: float) -> np.ndarray:
    """Dense 3x3 Gaussian (sigma 1) convolution with clamped borders, blended by alpha."""
    g = [[math.exp(-(dr * dr + dc * dc) / 2.0) for dc in (-1, 0, 1)] for dr in (-1, 0, 1)]
    total = sum(sum(r) for r in g)
    field = {}
    for i, (kind, (r, c)) in enumerate(zip(kinds, grid)):
        if kind == TokenKind.PATCH:
            field[(int(r), int(c))] = float(scores[i])
    out = [float(s) for s in scores]
    for i, (kind, (r, c)) in enumerate(zip(kinds, grid)):
        if kind != TokenKind.PATCH:
            continue
        acc = 0.0
        for a, dr in enumerate((-1, 0, 1)):
            for b, dc in enumerate((-1, 0, 1)):
                rr = min(max(int(r) + dr, 0), rows - 1)
                cc = min(max(int(c) + dc, 0), cols - 1)
                acc += g[a][b] / total * field[(rr, cc)]
        out[i] = (1 - alpha) * float(scores[i]) + alpha * acc
    return np.array(out)


def oracle_diversity(keys, reference_keys) -> list[float]:
    if len(reference_keys) == 0:
        return [1.0] * len(keys)
    return [1.0 - max(oracle_cosine(k, r) for r in reference_keys) for k in keys]


def oracle_hybrid(activation, keys, reference_keys, beta: float) -> np.ndarray:
    def norm(x):
        lo, hi = min(x), max(x)
        return [0.5] * len(x) if hi == lo else [(v - lo) / (hi - lo) for v in x]

    a = norm([float(x) for x in activation])
    d = norm(oracle_diversity(keys, reference_keys))
    return np.array([beta * x + (1 - beta) * y for x, y in zip(a, d)])


def oracle_triage(scores, protected_count: int, budget: int, merge_ratio: float):
    """Search every threshold pair for the split the triage policy asks for.

    Thresholds range over the distinct scores plus +inf. A pair is feasible
    when its retain set fits the budget; among feasible pairs we want the
    largest retain set whose merge set has exactly ``ceil(r_m * rest)``
    members. Returns ``(retain, merge, evict)`` index sets, or ``None`` when
    ties make the count-based split unreachable by thresholds alone.
    """
    s = [float(x) for x in scores]
    cands = sorted(set(s)) + [math.inf]
    room = budget - protected_count
    best = None
    for t_evict, t_merge in product(cands, cands):
        if t_merge > t_evict:
            continue
        R = {i for i, x in enumerate(s) if x >= t_evict}
        M = {i for i, x in enumerate(s) if t_merge <= x < t_evict}
        E = {i for i, x in enumerate(s) if x < t_merge}
        if len(R) > room:
            continue
        if len(M) != math.ceil(Fraction(str(merge_ratio)) * (len(s) - len(R))):
            continue
        if best is None or len(R) > len(best[0]):
            best = (R, M, E)
    if best is None or len(best[0]) != min(len(s), room):
        return None
    return best


def oracle_dap_hist(token_ids, frames, diversity, eta, tau, kmax) -> set[int]:
    """Historical anchors by exhaustive search over frame subsets.

    Every subset of at most ``kmax`` source frames yields a candidate pick:
    its ``floor(eta * n)`` best eligible tokens (diversity >= tau; ties to the
    lower id). The answer is the candidate whose descending diversity
    sequence is lexicographically largest.
    """
    quota = math.floor(eta * len(token_ids))
    if quota == 0 or kmax == 0:
        return set()
    elig = sorted(
        (i for i in range(len(token_ids)) if diversity[i] >= tau),
        key=lambda i: (-diversity[i], token_ids[i]),
    )
    distinct = sorted({frames[i] for i in elig})
    size = min(kmax, len(distinct))
    best_key, best = (), set()
    for subset in combinations(distinct, size):
        allowed = set(subset)
        pick = [i for i in elig if frames[i] in allowed][:quota]
        key = tuple((diversity[i], -token_ids[i]) for i in pick)
        if key > best_key:
            best_key, best = key, {token_ids[i] for i in pick}
    return best


# ------------------------------------------------ pure-eviction reference

def _unit_rows(keys) -> np.ndarray:
    rows = []
    for k in keys:
        nk = float(np.sqrt(np.dot(k, k)))
        rows.append(k / nk if nk >= _ZERO else np.zeros_like(k))
    return np.array(rows)


def _ref_self_diversity(keys) -> list[float]:
    n = len(keys)
    if n < 2:
        return [1.0] * n
    unit = _unit_rows(keys)
    out = []
    for i in range(n):
        dots = unit @ unit[i]
        dots[i] = -math.inf
        out.append(1.0 - float(dots.max()))
    return out


def reference_pure_eviction(frames, cfg: PipelineConfig) -> list[list[dict]]:
    """Eviction-only streaming cache: keep the best-scored tokens, drop the rest.

    Scores are the raw residual scores, smoothed for the incoming frame and
    blended with key diversity exactly as the compressed pipeline does, and
    anchors follow the same simplified protection rule. Returns, per frame,
    one dict per layer with the surviving token ids and arrays.
    """
    layout = FrameLayout.for_config(cfg)
    rows, cols = layout.shape
    budgets = layer_budgets(cfg)
    M = cfg.tokens_per_frame
    caches = [
        {"ids": [], "frame": [], "keys": [], "values": [], "raw": [], "score": []}
        for _ in range(cfg.num_layers)
    ]
    protected = [set() for _ in range(cfg.num_layers)]
    initial: set[int] = set()
    history = []
    next_id = 0
    for t, acts in enumerate(frames):
        new_ids = list(range(next_id, next_id + M))
        next_id += M
        if t == 0:
            initial = set(new_ids)
        for layer, a in enumerate(acts):
            c = caches[layer]
            smoothed = oracle_smooth(a.raw_scores, layout.kinds, layout.grid, rows, cols, cfg.smoothing_alpha)
            c["ids"] += new_ids
            c["frame"] += [t] * M
            c["keys"] += [row.copy() for row in a.keys]
            c["values"] += [row.copy() for row in a.values]
            c["raw"] += list(a.raw_scores)
            activation = list(c["score"]) + list(smoothed)
            c["score"] += list(a.raw_scores)
            free = [i for i, tid in enumerate(c["ids"]) if tid not in protected[layer]]
            anchors = [i for i, tid in enumerate(c["ids"]) if tid in protected[layer]]
            pri = _ref_hybrid(
                [activation[i] for i in free], [c["keys"][i] for i in free],
                [c["keys"][i] for i in anchors], cfg.hybrid_beta,
            )
            room = budgets[layer] - len(anchors)
            ranked = sorted(range(len(free)), key=lambda j: (-pri[j], j))
            keep_free = {free[j] for j in ranked[:room]}
            keep = [i for i in range(len(c["ids"])) if i in keep_free or i in set(anchors)]
            for name in c:
                c[name] = [c[name][i] for i in keep]
        for layer in range(cfg.num_layers):
            c = caches[layer]
            is_init = [tid in initial for tid in c["ids"]]
            anchors = {tid for tid, f in zip(c["ids"], is_init) if f}
            hist = [i for i, f in enumerate(is_init) if not f]
            if hist and cfg.dap_eta > 0:
                div_all = _ref_self_diversity(c["keys"])
                anchors |= oracle_dap_hist(
                    [c["ids"][i] for i in hist], [c["frame"][i] for i in hist],
                    [div_all[i] for i in hist], cfg.dap_eta, cfg.dap_tau, cfg.dap_kmax,
                )
            protected[layer] = anchors
        history.append(
            [
                {
                    "ids": list(c["ids"]),
                    "keys": np.array(c["keys"]).reshape(len(c["ids"]), -1),
                    "values": np.array(c["values"]).reshape(len(c["ids"]), -1),
                    "raw": np.array(c["raw"]),
                    "protected": set(p),
                }
                for c, p in zip(caches, protected)
            ]
        )
    return history


def _ref_hybrid(activation, keys, anchor_keys, beta):
    def norm(x):
        if not x:
            return []
        lo, hi = min(x), max(x)
        return [0.5] * len(x) if hi == lo else [(v - lo) / (hi - lo) for v in x]

    act = norm(list(activation))
    if beta == 1.0:
        return act
    if anchor_keys:
        anchors = _unit_rows(anchor_keys)
        div = [1.0 - float((anchors @ u).max()) for u in _unit_rows(keys)] if keys else []
    else:
        div = [1.0] * len(keys)
    dn = norm(div)
    return [beta * x + (1 - beta) * y for x, y in zip(act, dn)]
