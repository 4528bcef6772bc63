"""One layer's retain / merge / evict decision, end to end.

Ten cached tokens compete for a budget of five, one of them protected. The
best four stay, half of the rest are folded into their nearest surviving
neighbour, and the remainder are dropped.
"""

import numpy as np

from streamkv import LayerCache, compress_layer, triage

rng = np.random.default_rng(0)
n, d = 10, 4
keys = rng.normal(size=(n, d))
scores = np.round(rng.uniform(0.5, 3.0, size=n), 2)
protected = np.zeros(n, dtype=bool)
protected[0] = True

cache = LayerCache(
    0, 5, d,
    token_ids=np.arange(n), frame_index=np.zeros(n, dtype=np.int64),
    kinds=np.ones(n, dtype=np.int64), grid=np.full((n, 2), -1),
    keys=keys, values=keys.copy(), raw_scores=scores, enhanced_scores=scores,
    protected=protected,
)

free = scores[~protected]
tri = triage(free, protected_count=1, budget=5, merge_ratio=0.5)
print("evictable scores:", free)
print("retain/merge/evict sizes:", tri.sizes, " thresholds:", tri.tau_merge, tri.tau_evict)

out, stats, tri = compress_layer(cache, free, merge_ratio=0.5)
print("\nmerge assignments (cache position -> target):", tri.assignment)
print("surviving tokens:", out.token_ids.tolist(), " budget:", out.budget)
print("tokens absorbed by each survivor:", out.absorbed.tolist())
before = scores[np.concatenate([tri.retain, [0], tri.merge])].sum()
print(f"score mass before {before:.2f}, after {out.enhanced_scores.sum():.2f}")
