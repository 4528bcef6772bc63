"""Acceptance suite: one test per criterion, each printing a verdict line.

Run with ``pytest tests/test_acceptance.py -v``; the per-criterion summary
appears in the "acceptance criteria" section at the end of the output.
"""

import itertools
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from streamkv import PipelineConfig
from streamkv.clces import RankWindow, compute_ranks, consistency, normalize_ranks
from streamkv.harness.oracles import (
    oracle_batch_merge,
    oracle_nn,
    oracle_rank,
    oracle_triage,
    reference_pure_eviction,
)
from streamkv.harness.runner import (
    DEFAULT_AXIS_VALUES,
    generate_stream,
    record,
    replay,
    simulate,
    sweep,
)
from streamkv.hcc import TriageResult, fuse, merge_count, nn_assign, triage
from streamkv.core import LayerCache
from streamkv.pipeline import StreamState, process_frame

FIXTURE = json.loads((Path(__file__).parent / "fixtures" / "uniform_null.json").read_text())


@pytest.fixture
def verdict(record_property):
    def _set(title, detail=""):
        record_property("title", title)
        record_property("detail", detail)

    return _set


def _random_config(rng) -> tuple[PipelineConfig, int]:
    layers = int(rng.integers(1, 9))
    m = int(rng.integers(4, 65))
    cam = int(rng.integers(0, 2))
    reg = int(rng.integers(0, min(4, m - cam - 1) + 1))
    cfg = PipelineConfig(
        num_layers=layers,
        tokens_per_frame=m,
        camera_tokens=cam,
        register_tokens=reg,
        per_layer_budget=int(rng.integers(m, 8 * m + 1)),
        window_size=int(rng.integers(1, 11)),
        consistency_weight=float(rng.choice([0.0, 0.25, 0.5, 1.0, 3.0])),
        merge_ratio=float(rng.choice([0.0, 0.05, 0.15, 0.3, 0.7, 1.0])),
        smoothing_alpha=float(rng.uniform(0, 1)),
        hybrid_beta=float(rng.choice([0.0, 0.5, 1.0, rng.uniform(0, 1)])),
        dap_tau=float(rng.uniform(0, 0.5)),
        dap_eta=float(rng.choice([0.0, 0.05, 0.2])),
        dap_kmax=int(rng.integers(0, 5)),
        d_model=int(rng.choice([8, 16, 32])),
        head_dim=int(rng.choice([4, 8, 16])),
        d_ff=int(rng.choice([16, 32, 64])),
        rng_seed=int(rng.integers(0, 2**31)),
    )
    return cfg, int(rng.integers(5, 51))


def test_criterion_01_budget_invariant(verdict):
    rng = np.random.default_rng(1001)
    violations = []
    start = time.perf_counter()
    frames_done = 0
    for run_idx in range(200):
        cfg, frames = _random_config(rng)
        regime = "structured" if run_idx % 2 else "plain"
        _, _, states = simulate(cfg, n_frames=frames, regime=regime, keep_states=True)
        for st in states:
            for cache in st.caches:
                if len(cache) > cache.budget:
                    violations.append((run_idx, st.frame_counter, cache.layer_index, len(cache)))
                cache.check_invariants()
        frames_done += frames
    elapsed = time.perf_counter() - start
    verdict("budget invariant", f"200 configs, {frames_done} frames, {len(violations)} violations, {elapsed:.1f}s")
    assert not violations
    assert elapsed < 120


def test_criterion_02_baseline_reduction(verdict):
    diffs = 0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        cfg = PipelineConfig(
            num_layers=4, tokens_per_frame=32, per_layer_budget=int(rng.integers(32, 129)),
            d_model=16, head_dim=8, d_ff=32, consistency_weight=0.0, merge_ratio=0.0,
            window_size=int(rng.integers(1, 8)), smoothing_alpha=float(rng.uniform(0, 1)),
            hybrid_beta=float(rng.choice([0.5, 1.0, rng.uniform(0, 1)])),
            dap_eta=float(rng.choice([0.0, 0.05, 0.1])), rng_seed=seed,
        )
        stream = generate_stream(seed, 12, cfg)
        ref = reference_pure_eviction(stream, cfg)
        state = StreamState.initial(cfg)
        for acts, expect in zip(stream, ref):
            state = process_frame(state, acts, cfg)
            for cache, prot, r in zip(state.caches, state.protected, expect):
                same = (
                    cache.token_ids.tolist() == r["ids"]
                    and cache.keys.tobytes() == r["keys"].tobytes()
                    and cache.values.tobytes() == r["values"].tobytes()
                    and cache.raw_scores.tobytes() == r["raw"].tobytes()
                    and set(prot) == r["protected"]
                )
                diffs += not same
    verdict("baseline reduction (lambda=0, r_m=0)", f"20 seeded runs, {diffs} differing layer snapshots")
    assert diffs == 0


def test_criterion_03_consistency_bounds_and_null(verdict):
    rng = np.random.default_rng(303)
    out_of_range = 0
    total = 0
    for w, n in ((2, 250_000), (5, 250_000), (7, 250_000), (10, 250_000)):
        win = RankWindow(w)
        for _ in range(w):
            win.push(rng.random(n))
        cons = consistency(win).consistency
        out_of_range += int(((cons < 0) | (cons > 1)).sum())
        total += n
    # zero-variance windows: constant rows, including values with inexact binary forms
    levels = np.concatenate([rng.random(997), [0.0, 1.0, 1 / 3]])
    win = RankWindow(5)
    for _ in range(5):
        win.push(levels)
    flat = consistency(win)
    exact_ones = bool((flat.consistency == 1.0).all() and (flat.std_ranks == 0.0).all())
    # null calibration against the frozen Monte Carlo fixture
    ref = FIXTURE["windows"]["5"]
    n = 10_000
    win = RankWindow(5)
    for _ in range(5):
        win.push(normalize_ranks(compute_ranks(rng.random(n))))
    cons = consistency(win).consistency
    se = math.hypot(cons.std(ddof=1) / math.sqrt(n), ref["stderr"])
    z = (cons.mean() - ref["mean"]) / se
    verdict(
        "consistency bounds and null calibration",
        f"{total} windows, {out_of_range} out of [0,1]; constant rows exact: {exact_ones}; "
        f"null mean {cons.mean():.6f} vs {ref['mean']:.6f} (z={z:+.3f})",
    )
    assert total >= 1_000_000 and out_of_range == 0
    assert exact_ones
    assert abs(z) <= 3


def test_criterion_04_rank_oracle(verdict):
    rng = np.random.default_rng(404)
    mismatches = 0
    for i in range(1000):
        n = int(rng.integers(1, 513))
        kind = i % 4
        if kind == 0:
            s = rng.normal(size=n)
        elif kind == 1:
            s = rng.integers(0, 4, size=n).astype(float)  # heavy duplicates
        elif kind == 2:
            s = np.full(n, rng.normal())
        else:
            s = np.round(rng.normal(size=n), 1)
        mismatches += compute_ranks(s).tolist() != oracle_rank(s)
    verdict("rank oracle equivalence", f"1000 vectors, {mismatches} mismatches")
    assert mismatches == 0


def test_criterion_05_nn_oracle(verdict):
    rng = np.random.default_rng(505)
    mismatches = 0
    for i in range(500):
        nm = int(rng.integers(1, 65))
        nt = int(rng.integers(1, 129))
        merge = rng.normal(size=(nm, 16))
        targets = rng.normal(size=(nt, 16))
        if i % 3 == 0:
            merge[rng.random(nm) < 0.2] = 0.0
            targets[rng.random(nt) < 0.2] = 0.0
        if i % 3 == 1:
            # duplicate and rescaled keys, on both sides
            src = rng.integers(0, nt, size=nt // 2)
            dst = rng.integers(0, nt, size=nt // 2)
            targets[dst] = targets[src] * rng.uniform(0.5, 2.0, size=(len(src), 1))
            pick = rng.integers(0, nt, size=nm // 2)
            merge[: len(pick)] = targets[pick]
        mismatches += nn_assign(merge, targets).tolist() != oracle_nn(merge, targets)
    verdict("nearest-neighbour oracle equivalence", f"500 instances, {mismatches} mismatches")
    assert mismatches == 0


def _group_cache(keys, values, scores):
    n, d = keys.shape
    return LayerCache(
        0, n, d, token_ids=np.arange(n), frame_index=np.zeros(n, dtype=np.int64),
        kinds=np.ones(n, dtype=np.int64), grid=np.full((n, 2), -1), keys=keys, values=values,
        raw_scores=scores, enhanced_scores=scores,
    )


def test_criterion_06_merge_algebra(verdict):
    rng = np.random.default_rng(606)
    worst = 0.0
    orderings = 0
    for size in range(1, 9):
        for _ in range(12):
            d = int(rng.integers(2, 17))
            keys = rng.normal(size=(size + 1, d)) * rng.uniform(0.1, 10)
            values = rng.normal(size=(size + 1, d))
            scores = rng.uniform(1e-3, 5, size=size + 1)
            cache = _group_cache(keys, values, scores)
            ref_k, ref_v, ref_s = oracle_batch_merge(keys, values, scores)
            cands = list(range(1, size + 1))
            if size <= 5:
                perms = itertools.permutations(cands)
            else:
                perms = (tuple(rng.permutation(cands)) for _ in range(200))
            tri = TriageResult(np.array([0]), np.array(cands), np.zeros(0, dtype=np.int64), 0.0, 0.0,
                               {i: 0 for i in cands})
            for perm in perms:
                out, _ = fuse(cache, tri, order=perm)
                for got, want in ((out.keys[0], ref_k), (out.values[0], ref_v)):
                    err = np.abs(got - want) / np.maximum(np.abs(want), np.abs(want).max())
                    worst = max(worst, float(err.max()))
                worst = max(worst, abs(out.enhanced_scores[0] - ref_s) / ref_s)
                orderings += 1
    verdict("merge algebra", f"{orderings} orderings, worst relative error {worst:.2e}")
    assert worst <= 1e-9


def test_criterion_07_triage_partition(verdict):
    rng = np.random.default_rng(707)
    violations = 0
    oracle_checked = 0
    for i in range(1000):
        n = int(rng.integers(1, 41))
        s = rng.integers(0, 8, size=n).astype(float) if i % 2 else rng.uniform(0, 10, size=n)
        prot = int(rng.integers(0, 10))
        budget = prot + int(rng.integers(0, 45))
        rm = float(rng.choice([0.0, 0.05, 0.15, 0.3, 0.5, 1.0, rng.uniform(0, 1)]))
        tri = triage(s, prot, budget, rm)
        r, m, e = (set(x.tolist()) for x in (tri.retain, tri.merge, tri.evict))
        ok = r | m | e == set(range(n)) and not (r & m or r & e or m & e)
        ok &= len(r) == min(n, budget - prot)
        ok &= len(m) == merge_count(rm, n - len(r))
        if r and m:
            ok &= s[list(r)].min() >= s[list(m)].max()
        if m and e:
            ok &= s[list(m)].min() >= s[list(e)].max()
        if r and e:
            ok &= s[list(r)].min() >= s[list(e)].max()
        ref = oracle_triage(s, prot, budget, rm)
        if ref is not None:
            oracle_checked += 1
            ok &= (r, m, e) == ref
        violations += not ok
    verdict("triage partition and dominance",
            f"1000 instances ({oracle_checked} cross-checked exhaustively), {violations} violations")
    assert violations == 0


def test_criterion_08_scale_invariance(verdict):
    rng = np.random.default_rng(808)
    violations = 0
    for i in range(200):
        n = int(rng.integers(2, 60))
        s = rng.uniform(0, 5, size=n) if i % 2 else rng.integers(0, 6, size=n).astype(float)
        prot = int(rng.integers(0, 5))
        budget = prot + int(rng.integers(0, n + 1))
        rm = float(rng.choice([0.0, 0.15, 0.5]))
        base = triage(s, prot, budget, rm)
        for c in (1e-3, 7.0, 1e3):
            t = triage(s * c, prot, budget, rm)
            violations += not all(
                np.array_equal(a, b) for a, b in zip((t.retain, t.merge, t.evict), (base.retain, base.merge, base.evict))
            )
        merge = rng.normal(size=(int(rng.integers(1, 20)), 16))
        targets = rng.normal(size=(int(rng.integers(1, 30)), 16))
        ref = nn_assign(merge, targets)
        for c in (1e-3, 7.0, 1e3):
            violations += not np.array_equal(nn_assign(merge * c, targets), ref)
            violations += not np.array_equal(nn_assign(merge, targets * c), ref)
        row = int(rng.integers(0, len(targets)))
        scaled = targets.copy()
        scaled[row] *= rng.uniform(1e-3, 1e3)
        violations += not np.array_equal(nn_assign(merge, scaled), ref)
    verdict("scale invariance", f"200 instances, {violations} violations")
    assert violations == 0


def test_criterion_09_ablation_machinery(verdict):
    base = PipelineConfig(per_layer_budget=256)
    tables = {axis: sweep(base, axis, frames=20) for axis in DEFAULT_AXIS_VALUES}
    counts = {axis: len(t.rows()) for axis, t in tables.items()}
    structure = counts == {"lambda": 5, "window": 4, "merge_ratio": 6, "components": 4}
    merged = [r["total_merged"] for r in tables["merge_ratio"].rows()]
    dispersion = [r["mean_reward_dispersion"] for r in tables["window"].rows()]
    lam0 = tables["lambda"].reports[0]
    off = tables["components"].reports[0]  # "none": CLCES and HCC both off
    baseline_ok = merged[0] == 0 and tables["components"].rows()[0]["total_merged"] == 0
    baseline_ok &= lam0.per_frame == simulate(base.replace(consistency_weight=0.0), n_frames=20)[0].per_frame
    distinct = len({json.dumps(r.per_frame) for r in tables["components"].reports}) == 4
    merged_up = all(b > a for a, b in zip(merged, merged[1:]))
    disp_down = all(b < a for a, b in zip(dispersion, dispersion[1:]))
    verdict(
        "ablation machinery",
        f"cells {counts}; merged by r_m {merged}; reward sd by W "
        f"{[round(x, 4) for x in dispersion]}; component cells distinct: {distinct}",
    )
    assert structure and baseline_ok and distinct and off.summary["total_merged"] == 0
    assert merged_up and disp_down


def test_criterion_10_determinism_and_replay(verdict, tmp_path):
    failures = 0
    for seed in range(10):
        cfg = PipelineConfig(per_layer_budget=192, rng_seed=seed)
        path = tmp_path / f"s{seed}.skvt"
        recorded = record(cfg, 8, path)
        replayed = replay(cfg, path)
        again, s1, _ = simulate(cfg, n_frames=8)
        _, s2, _ = simulate(cfg, n_frames=8)
        failures += not recorded.same_as(replayed)
        failures += not recorded.same_as(again)
        failures += not all(
            a.keys.tobytes() == b.keys.tobytes() and a.values.tobytes() == b.values.tobytes()
            and a.token_ids.tobytes() == b.token_ids.tobytes()
            for a, b in zip(s1.caches, s2.caches)
        )
    verdict("determinism and replay", f"10 seeds, {failures} mismatches")
    assert failures == 0


def test_criterion_11_throughput(verdict):
    cfg = PipelineConfig(num_layers=8, tokens_per_frame=64, per_layer_budget=512)
    start = time.perf_counter()
    report, state, _ = simulate(cfg, n_frames=100)
    elapsed = time.perf_counter() - start
    verdict("throughput", f"L=8 M=64 B=512 T=100 in {elapsed:.2f}s, peak {report.summary['peak_cache_tokens']}")
    assert report.summary["peak_cache_tokens"] <= 8 * 512
    assert elapsed < 60
