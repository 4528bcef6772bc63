"""Score sources: a deterministic toy causal transformer and recorded traces.

The toy stack exists to feed the cache pipeline with realistically shaped
activations. Every block does one cross-frame attention step against its
layer's (compressed) KV cache followed by a pre-LN feed-forward residual whose
norm is the token's raw importance score.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator, Sequence

import numpy as np

from .core import DimensionMismatch, FrameLayout, LayerCache, PipelineConfig, StreamKVError

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class NonFiniteActivation(StreamKVError):
    pass


class TraceFormatError(StreamKVError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (at byte {offset})")


@dataclass(frozen=True, eq=False)
class FrameActivations:
    frame_index: int
    layer_index: int
    hidden: np.ndarray  # (M, d_model), the post-attention state that is scored
    keys: np.ndarray  # (M, d)
    values: np.ndarray  # (M, d)
    raw_scores: np.ndarray  # (M,)

    def __post_init__(self):
        m = self.raw_scores.shape[0]
        if not (self.hidden.shape[0] == self.keys.shape[0] == self.values.shape[0] == m):
            raise DimensionMismatch("hidden/keys/values/raw_scores row counts differ")
        if self.keys.shape != self.values.shape:
            raise DimensionMismatch(f"keys {self.keys.shape} vs values {self.values.shape}")
        if not np.all(np.isfinite(self.raw_scores)) or np.any(self.raw_scores < 0):
            raise NonFiniteActivation("raw scores must be finite and non-negative")

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameActivations):
            return NotImplemented
        return (
            self.frame_index == other.frame_index
            and self.layer_index == other.layer_index
            and all(
                np.array_equal(getattr(self, n), getattr(other, n))
                for n in ("hidden", "keys", "values", "raw_scores")
            )
        )


@dataclass(frozen=True, eq=False)
class ToyBlockParams:
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    ffn_w1: np.ndarray  # (d_model, d_ff)
    ffn_w2: np.ndarray  # (d_ff, d_model)
    lambda2: float
    wq: np.ndarray  # (d_model, d)
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (d, d_model), maps the attention output back to the residual stream

    def __post_init__(self):
        if not self.lambda2 > 0:
            raise ValueError("lambda2 must be positive")
        for name in ("ln_gain", "ln_bias", "ffn_w1", "ffn_w2", "wq", "wk", "wv", "wo"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"{name} has non-finite entries")

    @property
    def d_model(self) -> int:
        return self.ffn_w1.shape[0]

    @property
    def head_dim(self) -> int:
        return self.wk.shape[1]

    def with_lambda2(self, lambda2: float) -> "ToyBlockParams":
        return ToyBlockParams(
            self.ln_gain, self.ln_bias, self.ffn_w1, self.ffn_w2, lambda2,
            self.wq, self.wk, self.wv, self.wo,
        )


def init_block_params(
    rng: np.random.Generator, d_model: int, head_dim: int, d_ff: int, lambda2: float = 1.0
) -> ToyBlockParams:
    scale = 1.0 / math.sqrt(d_model)

    def mat(rows, cols):
        return rng.normal(0.0, scale, size=(rows, cols))

    return ToyBlockParams(
        ln_gain=np.ones(d_model),
        ln_bias=np.zeros(d_model),
        ffn_w1=mat(d_model, d_ff),
        ffn_w2=mat(d_ff, d_model),
        lambda2=lambda2,
        wq=mat(d_model, head_dim),
        wk=mat(d_model, head_dim),
        wv=mat(d_model, head_dim),
        wo=mat(head_dim, d_model),
    )


def gelu(x: np.ndarray) -> np.ndarray:
    """GELU, tanh approximation."""
    return 0.5 * x * (1.0 + np.tanh(_GELU_C * (x + 0.044715 * x**3)))


def layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / np.sqrt(var + LN_EPS) * gain + bias


def ffn_residual(hidden: np.ndarray, params: ToyBlockParams) -> np.ndarray:
    """``lambda2 * FFN(LN(hidden))`` for a row or a batch of rows."""
    with np.errstate(all="ignore"):
        normed = layer_norm(hidden, params.ln_gain, params.ln_bias)
        inner = gelu(normed @ params.ffn_w1)
        out = params.lambda2 * (inner @ params.ffn_w2)
    for stage in (normed, inner, out):
        if not np.all(np.isfinite(stage)):
            raise NonFiniteActivation("NaN/Inf inside the feed-forward residual")
    return out


def ffn_residual_scores(hidden: np.ndarray, params: ToyBlockParams) -> np.ndarray:
    """Per-row L2 norm of the scaled feed-forward residual."""
    hidden = np.asarray(hidden, dtype=np.float64)
    if not np.all(np.isfinite(hidden)):
        raise NonFiniteActivation("hidden state is not finite")
    return np.linalg.norm(ffn_residual(hidden, params), axis=-1)


def ffn_residual_score(hidden_row: np.ndarray, params: ToyBlockParams) -> float:
    return float(ffn_residual_scores(np.asarray(hidden_row)[None, :], params)[0])


def causal_attention(
    queries: np.ndarray, keys: np.ndarray, values: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Scaled dot-product attention of ``queries`` over every row of ``keys``.

    Returns ``(output, weights)``; each weight row sums to one.
    """
    logits = queries @ keys.T / math.sqrt(keys.shape[1])
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    w /= w.sum(axis=1, keepdims=True)
    return w @ values, w


def toy_block_forward(
    frame_hidden: np.ndarray,
    cache: LayerCache,
    params: ToyBlockParams,
    *,
    frame_index: int = 0,
    return_weights: bool = False,
):
    """One toy block over a frame: attention to [cache ; frame], then scoring.

    Frame tokens see every cached token and every token of their own frame.
    The returned ``hidden`` is the post-attention residual stream, i.e. the
    state that the feed-forward score is computed on.
    """
    frame_hidden = np.asarray(frame_hidden, dtype=np.float64)
    if frame_hidden.ndim != 2 or frame_hidden.shape[1] != params.d_model:
        raise DimensionMismatch(
            f"frame hidden {frame_hidden.shape} does not match d_model={params.d_model}"
        )
    if cache.dim != params.head_dim:
        raise DimensionMismatch(f"cache key dim {cache.dim} != head dim {params.head_dim}")
    q = frame_hidden @ params.wq
    k = frame_hidden @ params.wk
    v = frame_hidden @ params.wv
    all_k = np.concatenate([cache.keys, k])
    all_v = np.concatenate([cache.values, v])
    attn, weights = causal_attention(q, all_k, all_v)
    post = frame_hidden + attn @ params.wo
    acts = FrameActivations(
        frame_index=frame_index,
        layer_index=cache.layer_index,
        hidden=post,
        keys=k,
        values=v,
        raw_scores=ffn_residual_scores(post, params),
    )
    if return_weights:
        return acts, weights
    return acts


def block_output(acts: FrameActivations, params: ToyBlockParams) -> np.ndarray:
    """Residual stream after the feed-forward sublayer (next block's input)."""
    return acts.hidden + ffn_residual(acts.hidden, params)


REGIMES = ("plain", "structured")


class ToyModel:
    """Deterministic toy transformer stack plus a synthetic frame generator.

    Frames are built from a smooth spatial field over the patch grid, a slow
    temporal drift and per-frame noise. The ``structured`` regime additionally
    paints a *flat* block (identical low-salience tokens) in the top-left of
    the grid and a *textured* block (fresh random tokens every frame) in the
    bottom-right.
    """

    def __init__(self, cfg: PipelineConfig, regime: str = "plain"):
        if regime not in REGIMES:
            raise ValueError(f"unknown regime {regime!r}; expected one of {REGIMES}")
        self.cfg = cfg
        self.regime = regime
        self.layout = FrameLayout.for_config(cfg)
        rng = np.random.default_rng(cfg.rng_seed)
        self.params = [
            init_block_params(rng, cfg.d_model, cfg.head_dim, cfg.d_ff, cfg.ffn_scale)
            for _ in range(cfg.num_layers)
        ]
        self._base = self._spatial_field(rng)
        self._drift = rng.normal(0.0, 1.0, size=(2, cfg.d_model))
        rows, cols = self.layout.shape
        self.flat_mask = np.zeros(len(self.layout), dtype=bool)
        self.textured_mask = np.zeros(len(self.layout), dtype=bool)
        patch = self.layout.patch_mask
        r, c = self.layout.grid[:, 0], self.layout.grid[:, 1]
        self.flat_mask[patch & (r < max(1, rows // 2)) & (c < max(1, cols // 2))] = True
        self.textured_mask[patch & (r >= rows - max(1, rows // 3)) & (c >= cols - max(1, cols // 3))] = True
        self.textured_mask &= ~self.flat_mask
        self._flat_vec = self._pick_flat_vector(rng)

    def _spatial_field(self, rng: np.random.Generator) -> np.ndarray:
        cfg, layout = self.cfg, self.layout
        rows, cols = layout.shape
        base = rng.normal(0.0, 1.0, size=(len(layout), cfg.d_model))
        patch = layout.patch_mask
        # smooth low-frequency content over the grid for patch tokens
        freqs = rng.normal(0.0, 1.5, size=(cfg.d_model, 2))
        phase = rng.uniform(0, 2 * np.pi, size=cfg.d_model)
        pos = layout.grid[patch] / np.array([max(rows, 1), max(cols, 1)])
        smooth = np.sin(pos @ freqs.T * np.pi + phase) * 1.5
        base[patch] = 0.5 * base[patch] + smooth
        return base

    def _pick_flat_vector(self, rng: np.random.Generator) -> np.ndarray:
        """Direction whose self-attending residual has the lowest layer-0 score."""
        p = self.params[0]
        cands = rng.normal(0.0, 1.0, size=(256, self.cfg.d_model))
        self_affinity = np.einsum("ij,ij->i", cands @ p.wq, cands @ p.wk)
        post = cands + (cands @ p.wv) @ p.wo
        scores = ffn_residual_scores(post, p)
        scores[self_affinity <= 0] = np.inf
        best = cands[int(np.argmin(scores))]
        return 4.0 * math.sqrt(self.cfg.d_model) * best / np.linalg.norm(best)

    def frame_input(self, t: int) -> np.ndarray:
        cfg = self.cfg
        rng = np.random.default_rng([cfg.rng_seed, 7919, t])
        x = (
            self._base
            + 0.3 * (math.sin(0.1 * t) * self._drift[0] + math.cos(0.07 * t) * self._drift[1])
            + rng.normal(0.0, 0.3, size=self._base.shape)
        )
        if self.regime == "structured":
            x[self.flat_mask] = self._flat_vec
            n_tex = int(self.textured_mask.sum())
            x[self.textured_mask] = rng.normal(0.0, 1.0, size=(n_tex, cfg.d_model)) * rng.uniform(
                0.5, 3.0, size=(n_tex, 1)
            )
        return x

    def forward_frame(self, t: int, caches: Sequence[LayerCache]) -> list[FrameActivations]:
        h = self.frame_input(t)
        out = []
        for params, cache in zip(self.params, caches):
            acts = toy_block_forward(h, cache, params, frame_index=t)
            out.append(acts)
            h = block_output(acts, params)
        return out


# ---------------------------------------------------------------- trace I/O

TRACE_MAGIC = b"SKVT"
TRACE_VERSION = 1
_HEADER = struct.Struct("<4s6I4x")
_RECORD_HEAD = struct.Struct("<2I")
assert _HEADER.size == 32


@dataclass(frozen=True)
class TraceHeader:
    num_layers: int
    tokens_per_frame: int
    d_model: int
    head_dim: int
    frame_count: int

    @property
    def record_size(self) -> int:
        m, dm, d = self.tokens_per_frame, self.d_model, self.head_dim
        return _RECORD_HEAD.size + 8 * (m * dm + 2 * m * d + m)

    def pack(self) -> bytes:
        return _HEADER.pack(
            TRACE_MAGIC, TRACE_VERSION, self.num_layers, self.tokens_per_frame,
            self.d_model, self.head_dim, self.frame_count,
        )


class TraceWriter:
    """Streams FrameActivations to disk; the frame count is patched on close."""

    def __init__(self, path, num_layers: int, tokens_per_frame: int, d_model: int, head_dim: int):
        self.header = TraceHeader(num_layers, tokens_per_frame, d_model, head_dim, 0)
        self._fh: BinaryIO = open(path, "wb")
        self._fh.write(self.header.pack())
        self._next = (0, 0)

    def write(self, acts: FrameActivations) -> None:
        h = self.header
        if (acts.frame_index, acts.layer_index) != self._next:
            raise ValueError(
                f"record ({acts.frame_index}, {acts.layer_index}) out of order; expected {self._next}"
            )
        m = h.tokens_per_frame
        if acts.hidden.shape != (m, h.d_model) or acts.keys.shape != (m, h.head_dim):
            raise DimensionMismatch("record dimensions differ from the trace header")
        self._fh.write(_RECORD_HEAD.pack(acts.frame_index, acts.layer_index))
        for arr in (acts.hidden, acts.keys, acts.values, acts.raw_scores):
            self._fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        layer = acts.layer_index + 1
        self._next = (acts.frame_index + 1, 0) if layer == h.num_layers else (acts.frame_index, layer)

    def close(self) -> None:
        if self._fh.closed:
            return
        frame, layer = self._next
        if layer != 0:
            self._fh.close()
            raise ValueError(f"trace closed mid-frame (frame {frame} has {layer} layers)")
        self.header = TraceHeader(**{**self.header.__dict__, "frame_count": frame})
        self._fh.seek(0)
        self._fh.write(self.header.pack())
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def save_trace(
    records: Iterable[FrameActivations], path, *, num_layers: int | None = None,
    tokens_per_frame: int | None = None, d_model: int | None = None, head_dim: int | None = None,
) -> None:
    """Write records in (frame, layer) order.

    Dimensions are taken from the first record; for an empty trace pass them
    explicitly (they default to zero).
    """
    records = list(records)
    if records:
        first = records[0]
        num_layers = num_layers or 1 + max(r.layer_index for r in records)
        tokens_per_frame, d_model = first.hidden.shape
        head_dim = first.keys.shape[1]
    ordered = sorted(records, key=lambda r: (r.frame_index, r.layer_index))
    with TraceWriter(path, num_layers or 0, tokens_per_frame or 0, d_model or 0, head_dim or 0) as w:
        for rec in ordered:
            w.write(rec)


def read_trace_header(path) -> TraceHeader:
    with open(path, "rb") as fh:
        return _read_header(fh)


def _read_header(fh: BinaryIO) -> TraceHeader:
    raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise TraceFormatError("truncated header", len(raw))
    magic, version, L, M, dm, d, frames = _HEADER.unpack(raw)
    if magic != TRACE_MAGIC:
        raise TraceFormatError(f"bad magic {magic!r}", 0)
    if version != TRACE_VERSION:
        raise TraceFormatError(f"unsupported version {version}", 4)
    return TraceHeader(L, M, dm, d, frames)


def load_trace(path) -> Iterator[FrameActivations]:
    """Lazily yield records in (frame, layer) order, one record in memory at a time."""
    with open(path, "rb") as fh:
        header = _read_header(fh)
        m, dm, d = header.tokens_per_frame, header.d_model, header.head_dim
        offset = _HEADER.size
        for frame in range(header.frame_count):
            for layer in range(header.num_layers):
                buf = fh.read(header.record_size)
                if len(buf) < header.record_size:
                    raise TraceFormatError("truncated record", offset + len(buf))
                f_idx, l_idx = _RECORD_HEAD.unpack_from(buf)
                if l_idx >= header.num_layers:
                    raise TraceFormatError(
                        f"layer {l_idx} out of range for {header.num_layers} layers", offset + 4
                    )
                if (f_idx, l_idx) != (frame, layer):
                    raise TraceFormatError(
                        f"record ({f_idx}, {l_idx}) out of order; expected ({frame}, {layer})", offset
                    )
                data = np.frombuffer(buf, dtype="<f8", offset=_RECORD_HEAD.size).astype(np.float64)
                a, b, c = m * dm, m * dm + m * d, m * dm + 2 * m * d
                try:
                    yield FrameActivations(
                        frame_index=f_idx,
                        layer_index=l_idx,
                        hidden=data[:a].reshape(m, dm),
                        keys=data[a:b].reshape(m, d),
                        values=data[b:c].reshape(m, d),
                        raw_scores=data[c:],
                    )
                except NonFiniteActivation as exc:
                    raise TraceFormatError(str(exc), offset) from exc
                offset += header.record_size
        if fh.read(1):
            raise TraceFormatError("trailing bytes after the last record", offset)


def iter_trace_frames(path) -> Iterator[list[FrameActivations]]:
    """Group a trace into per-frame lists of per-layer activations."""
    header = read_trace_header(path)
    frame: list[FrameActivations] = []
    for rec in load_trace(path):
        frame.append(rec)
        if len(frame) == header.num_layers:
            yield frame
            frame = []
