import struct

import numpy as np
import pytest

from streamkv.core import DimensionMismatch, LayerCache, PipelineConfig
from streamkv.harness.oracles import oracle_dense_attention, oracle_ffn_score
from streamkv.harness.runner import generate_stream
from streamkv.scoresrc import (
    FrameActivations,
    NonFiniteActivation,
    ToyModel,
    TraceFormatError,
    causal_attention,
    ffn_residual_score,
    init_block_params,
    load_trace,
    read_trace_header,
    save_trace,
    toy_block_forward,
)


def params(seed=0, d_model=8, head_dim=8, d_ff=16, lam=1.0):
    return init_block_params(np.random.default_rng(seed), d_model, head_dim, d_ff, lam)


def cache_with(keys, values, layer=0):
    n, d = keys.shape
    return LayerCache(
        layer, 100, d, token_ids=np.arange(n), frame_index=np.zeros(n, dtype=np.int64),
        kinds=np.full(n, 1), grid=np.full((n, 2), -1), keys=keys, values=values,
        raw_scores=np.ones(n), enhanced_scores=np.ones(n),
    )


# ------------------------------------------------------------ FFN scoring

def test_zero_hidden_scores_zero():
    p = params()
    assert ffn_residual_score(np.zeros(8), p) == 0.0


def test_score_homogeneous_in_lambda2(rng):
    p = params()
    h = rng.normal(size=8)
    base = ffn_residual_score(h, p)
    assert ffn_residual_score(h, p.with_lambda2(2.0)) == 2.0 * base
    assert ffn_residual_score(h, p.with_lambda2(0.25)) == pytest.approx(0.25 * base, rel=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_score_matches_straight_line_oracle(seed):
    p = params(seed, d_model=8, d_ff=16, lam=0.7)
    h = np.random.default_rng(100 + seed).normal(size=8) * 3
    assert ffn_residual_score(h, p) == pytest.approx(oracle_ffn_score(h, p), rel=1e-12)


def test_non_finite_scores_rejected():
    with pytest.raises(NonFiniteActivation):
        FrameActivations(0, 0, np.zeros((1, 2)), np.zeros((1, 2)), np.zeros((1, 2)), np.array([np.nan]))


# ------------------------------------------------------------- attention

def test_singleton_attention_weight_is_one(rng):
    p = params()
    empty = LayerCache(0, 10, 8)
    acts, w = toy_block_forward(rng.normal(size=(1, 8)), empty, p, return_weights=True)
    assert w.tolist() == [[1.0]]
    assert acts.raw_scores.shape == (1,)


def test_attention_rows_sum_to_one(rng):
    p = params()
    cache = cache_with(rng.normal(size=(5, 8)), rng.normal(size=(5, 8)))
    _, w = toy_block_forward(rng.normal(size=(6, 8)), cache, p, return_weights=True)
    assert w.shape == (6, 11)
    np.testing.assert_allclose(w.sum(axis=1), 1.0, atol=1e-12)


def test_attention_softmax_is_shift_stable():
    q = np.array([[1000.0, 0.0]])
    k = np.array([[1.0, 0.0], [0.0, 1.0]])
    out, w = causal_attention(q, k, np.eye(2))
    assert np.isfinite(w).all() and w.sum() == pytest.approx(1.0)


def test_block_matches_dense_attention_oracle():
    rng = np.random.default_rng(42)
    p = params(42, d_model=8, head_dim=8, d_ff=16)
    cache = cache_with(rng.normal(size=(2, 8)), rng.normal(size=(2, 8)), layer=3)
    frame = rng.normal(size=(4, 8))
    acts, w = toy_block_forward(frame, cache, p, frame_index=9, return_weights=True)
    ref = oracle_dense_attention(frame, cache.keys, cache.values, p)
    assert (acts.frame_index, acts.layer_index) == (9, 3)
    for name in ("hidden", "keys", "values", "raw_scores"):
        np.testing.assert_allclose(getattr(acts, name), ref[name], rtol=1e-12, atol=1e-13)
    np.testing.assert_allclose(w, ref["weights"], rtol=1e-12, atol=1e-15)


def test_block_dimension_checks(rng):
    p = params()
    with pytest.raises(DimensionMismatch):
        toy_block_forward(rng.normal(size=(2, 7)), LayerCache(0, 10, 8), p)
    with pytest.raises(DimensionMismatch):
        toy_block_forward(rng.normal(size=(2, 8)), LayerCache(0, 10, 4), p)


# -------------------------------------------------------------- toy model

def test_toy_model_is_deterministic(small_cfg):
    a = generate_stream(3, 4, small_cfg)
    b = generate_stream(3, 4, small_cfg)
    assert a == b
    assert generate_stream(4, 4, small_cfg) != a


def test_toy_model_unknown_regime(small_cfg):
    with pytest.raises(ValueError):
        ToyModel(small_cfg, "psychedelic")


def test_structured_masks_are_disjoint_patch_blocks():
    model = ToyModel(PipelineConfig(), "structured")
    assert model.flat_mask.sum() > 0 and model.textured_mask.sum() > 0
    assert not (model.flat_mask & model.textured_mask).any()
    assert model.layout.patch_mask[model.flat_mask].all()


# ---------------------------------------------------------------- traces

def _frames(cfg, n=2, seed=1):
    return [a for frame in generate_stream(seed, n, cfg) for a in frame]


def test_trace_roundtrip_bit_identical(tmp_path, small_cfg):
    recs = _frames(small_cfg)
    path = tmp_path / "t.skvt"
    save_trace(recs, path)
    back = list(load_trace(path))
    assert back == recs
    for a, b in zip(back, recs):
        assert a.raw_scores.tobytes() == b.raw_scores.tobytes()


def test_trace_resave_byte_identical(tmp_path, small_cfg):
    p1, p2 = tmp_path / "a.skvt", tmp_path / "b.skvt"
    save_trace(_frames(small_cfg, 3), p1)
    save_trace(load_trace(p1), p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_trace_order_is_lexicographic(tmp_path):
    cfg = PipelineConfig(num_layers=3, tokens_per_frame=4, d_model=8, head_dim=4, d_ff=8,
                         register_tokens=0, per_layer_budget=8)
    recs = _frames(cfg, 2)
    path = tmp_path / "t.skvt"
    save_trace(reversed(recs), path)
    back = list(load_trace(path))
    assert [(r.frame_index, r.layer_index) for r in back] == [(f, l) for f in range(2) for l in range(3)]
    assert read_trace_header(path).frame_count == 2


def test_empty_trace_is_header_only(tmp_path):
    path = tmp_path / "e.skvt"
    save_trace([], path, num_layers=8, tokens_per_frame=64, d_model=32, head_dim=16)
    assert path.stat().st_size == 32
    assert list(load_trace(path)) == []
    assert read_trace_header(path).num_layers == 8


def test_truncated_trace_reports_offset(tmp_path, small_cfg):
    path = tmp_path / "t.skvt"
    save_trace(_frames(small_cfg), path)
    size = read_trace_header(path).record_size
    cut = 32 + size + 100
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(TraceFormatError) as err:
        list(load_trace(path))
    assert err.value.offset == cut


def test_layer_index_out_of_range(tmp_path):
    cfg = PipelineConfig(num_layers=8, tokens_per_frame=4, d_model=8, head_dim=4, d_ff=8,
                         register_tokens=0, per_layer_budget=8)
    path = tmp_path / "t.skvt"
    save_trace(_frames(cfg, 1), path)
    raw = bytearray(path.read_bytes())
    size = read_trace_header(path).record_size
    struct.pack_into("<I", raw, 32 + 7 * size + 4, 9)  # last record claims layer 9
    path.write_bytes(bytes(raw))
    with pytest.raises(TraceFormatError, match="layer 9"):
        list(load_trace(path))


def test_bad_magic_and_trailing_bytes(tmp_path, small_cfg):
    path = tmp_path / "t.skvt"
    save_trace(_frames(small_cfg, 1), path)
    good = path.read_bytes()
    path.write_bytes(b"NOPE" + good[4:])
    with pytest.raises(TraceFormatError):
        list(load_trace(path))
    path.write_bytes(good + b"\0")
    with pytest.raises(TraceFormatError, match="trailing"):
        list(load_trace(path))
