"""Shared domain types and configuration for the streaming KV-cache engine."""

from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np


class StreamKVError(Exception):
    """Base class for all errors raised by this package."""


class InvalidConfig(StreamKVError):
    def __init__(self, errors: Sequence[tuple[str, str]]):
        self.errors = list(errors)
        msg = "; ".join(f"{name}: {why}" for name, why in self.errors)
        super().__init__(f"invalid config ({msg})")

    @property
    def fields(self) -> list[str]:
        return [name for name, _ in self.errors]


class DimensionMismatch(StreamKVError):
    pass


class TokenKind(enum.IntEnum):
    PATCH = 0
    CAMERA = 1
    REGISTER = 2


@dataclass(frozen=True, eq=False)
class TokenRecord:
    """One cached token.

    ``key`` and ``value`` share the head dimension ``d``; ``grid_pos`` is set
    for patch tokens only.
    """

    token_id: int
    frame_index: int
    kind: TokenKind
    grid_pos: tuple[int, int] | None
    key: np.ndarray
    value: np.ndarray
    raw_score: float
    enhanced_score: float
    protected_flag: bool = False
    absorbed_count: int = 0

    def __post_init__(self):
        key = np.asarray(self.key, dtype=np.float64)
        value = np.asarray(self.value, dtype=np.float64)
        if key.ndim != 1 or key.shape != value.shape or key.size == 0:
            raise DimensionMismatch(f"key {key.shape} / value {value.shape}")
        if (self.grid_pos is not None) != (self.kind == TokenKind.PATCH):
            raise ValueError("grid_pos must be present iff kind is PATCH")
        if self.raw_score < 0 or self.absorbed_count < 0:
            raise ValueError("raw_score and absorbed_count must be non-negative")
        object.__setattr__(self, "key", key)
        object.__setattr__(self, "value", value)


_NO_GRID = -1


class LayerCache:
    """Ordered token store for one layer, kept as parallel numpy columns.

    Mutating operations return a new cache; the instance you hold is never
    changed behind your back, which is what makes frame processing
    transactional.
    """

    __slots__ = (
        "layer_index",
        "budget",
        "token_ids",
        "frame_index",
        "kinds",
        "grid",
        "keys",
        "values",
        "raw_scores",
        "enhanced_scores",
        "protected",
        "absorbed",
    )

    def __init__(
        self,
        layer_index: int,
        budget: int,
        dim: int,
        *,
        token_ids=None,
        frame_index=None,
        kinds=None,
        grid=None,
        keys=None,
        values=None,
        raw_scores=None,
        enhanced_scores=None,
        protected=None,
        absorbed=None,
    ):
        if budget < 1:
            raise ValueError("budget must be positive")
        self.layer_index = int(layer_index)
        self.budget = int(budget)
        n = 0 if token_ids is None else len(token_ids)
        self.token_ids = _col(token_ids, n, np.int64)
        self.frame_index = _col(frame_index, n, np.int64)
        self.kinds = _col(kinds, n, np.int8)
        self.grid = (
            np.full((n, 2), _NO_GRID, dtype=np.int64)
            if grid is None
            else np.asarray(grid, dtype=np.int64).reshape(n, 2)
        )
        self.keys = (
            np.zeros((0, dim)) if keys is None else np.asarray(keys, dtype=np.float64)
        )
        self.values = (
            np.zeros((0, dim)) if values is None else np.asarray(values, dtype=np.float64)
        )
        self.raw_scores = _col(raw_scores, n, np.float64)
        self.enhanced_scores = _col(enhanced_scores, n, np.float64)
        self.protected = _col(protected, n, bool)
        self.absorbed = _col(absorbed, n, np.int64)
        if self.keys.shape != (n, dim) or self.values.shape != (n, dim):
            raise DimensionMismatch(
                f"expected ({n}, {dim}) keys/values, got {self.keys.shape} / {self.values.shape}"
            )

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def __len__(self) -> int:
        return len(self.token_ids)

    def __iter__(self) -> Iterator[TokenRecord]:
        return iter(self.entries)

    @property
    def entries(self) -> list[TokenRecord]:
        out = []
        for i in range(len(self)):
            kind = TokenKind(int(self.kinds[i]))
            pos = tuple(int(x) for x in self.grid[i]) if kind == TokenKind.PATCH else None
            out.append(
                TokenRecord(
                    token_id=int(self.token_ids[i]),
                    frame_index=int(self.frame_index[i]),
                    kind=kind,
                    grid_pos=pos,
                    key=self.keys[i].copy(),
                    value=self.values[i].copy(),
                    raw_score=float(self.raw_scores[i]),
                    enhanced_score=float(self.enhanced_scores[i]),
                    protected_flag=bool(self.protected[i]),
                    absorbed_count=int(self.absorbed[i]),
                )
            )
        return out

    @classmethod
    def from_records(
        cls, layer_index: int, budget: int, records: Sequence[TokenRecord], dim: int | None = None
    ) -> "LayerCache":
        if dim is None:
            if not records:
                raise ValueError("dim is required for an empty cache")
            dim = records[0].key.shape[0]
        ids = [r.token_id for r in records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate token ids")
        return cls(
            layer_index,
            budget,
            dim,
            token_ids=ids,
            frame_index=[r.frame_index for r in records],
            kinds=[int(r.kind) for r in records],
            grid=[r.grid_pos if r.grid_pos is not None else (_NO_GRID, _NO_GRID) for r in records],
            keys=np.array([r.key for r in records]).reshape(len(records), dim),
            values=np.array([r.value for r in records]).reshape(len(records), dim),
            raw_scores=[r.raw_score for r in records],
            enhanced_scores=[r.enhanced_score for r in records],
            protected=[r.protected_flag for r in records],
            absorbed=[r.absorbed_count for r in records],
        )

    def _columns(self) -> dict:
        return {name: getattr(self, name) for name in _ROW_COLUMNS}

    def copy(self) -> "LayerCache":
        cols = {k: v.copy() for k, v in self._columns().items()}
        return LayerCache(self.layer_index, self.budget, self.dim, **cols)

    def take(self, positions) -> "LayerCache":
        """New cache holding only ``positions`` (in the order given)."""
        idx = np.asarray(positions, dtype=np.int64)
        cols = {k: v[idx].copy() for k, v in self._columns().items()}
        return LayerCache(self.layer_index, self.budget, self.dim, **cols)

    def extend(self, other: "LayerCache") -> "LayerCache":
        """Append ``other``'s tokens after this cache's tokens."""
        if other.dim != self.dim:
            raise DimensionMismatch(f"key dim {other.dim} != cache dim {self.dim}")
        if np.intersect1d(self.token_ids, other.token_ids).size:
            raise ValueError("token ids already present in cache")
        cols = {
            k: np.concatenate([v, getattr(other, k)]) for k, v in self._columns().items()
        }
        return LayerCache(self.layer_index, self.budget, self.dim, **cols)

    def with_protection(self, protected_ids: Iterable[int]) -> "LayerCache":
        out = self.copy()
        ids = np.fromiter(protected_ids, dtype=np.int64)
        out.protected = np.isin(out.token_ids, ids)
        return out

    def position_of(self, token_id: int) -> int:
        hits = np.flatnonzero(self.token_ids == token_id)
        if hits.size == 0:
            raise KeyError(token_id)
        return int(hits[0])

    def check_invariants(self) -> None:
        if len(self) > self.budget:
            raise AssertionError(
                f"layer {self.layer_index}: {len(self)} tokens exceed budget {self.budget}"
            )
        if np.unique(self.token_ids).size != len(self):
            raise AssertionError(f"layer {self.layer_index}: duplicate token ids")

    def __eq__(self, other) -> bool:
        if not isinstance(other, LayerCache):
            return NotImplemented
        if (self.layer_index, self.budget, self.dim) != (other.layer_index, other.budget, other.dim):
            return False
        return all(
            np.array_equal(a, getattr(other, k)) for k, a in self._columns().items()
        )

    def __repr__(self) -> str:
        return f"LayerCache(layer={self.layer_index}, size={len(self)}, budget={self.budget})"


_ROW_COLUMNS = (
    "token_ids",
    "frame_index",
    "kinds",
    "grid",
    "keys",
    "values",
    "raw_scores",
    "enhanced_scores",
    "protected",
    "absorbed",
)


def _col(data, n: int, dtype) -> np.ndarray:
    if data is None:
        return np.zeros(n, dtype=dtype)
    arr = np.asarray(data, dtype=dtype).reshape(-1)
    if arr.shape[0] != n:
        raise DimensionMismatch(f"column length {arr.shape[0]} != {n}")
    return arr


@dataclass(frozen=True)
class PipelineConfig:
    # scoring / compression
    window_size: int = 5
    consistency_weight: float = 0.5
    merge_ratio: float = 0.15
    budget_total: int = 200_000
    smoothing_alpha: float = 0.5
    hybrid_beta: float = 0.5
    dap_tau: float = 0.2
    dap_eta: float = 0.05
    dap_kmax: int = 3
    # stream shape
    num_layers: int = 8
    tokens_per_frame: int = 64
    rng_seed: int = 0
    # 0 means derive floor(budget_total / num_layers) per layer
    per_layer_budget: int = 0
    # toy score source
    camera_tokens: int = 1
    register_tokens: int = 3
    d_model: int = 32
    head_dim: int = 16
    d_ff: int = 64
    ffn_scale: float = 1.0

    def replace(self, **changes) -> "PipelineConfig":
        return PipelineConfig(**{**asdict(self), **changes})

    @property
    def patch_tokens(self) -> int:
        return self.tokens_per_frame - self.camera_tokens - self.register_tokens

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = {f.name: f for f in fields(cls)}
        errors = [(k, "unknown key") for k in data if k not in known]
        if errors:
            raise InvalidConfig(errors)
        kwargs = {}
        for name, value in data.items():
            want = known[name].type
            if want == "int":
                if isinstance(value, bool) or not isinstance(value, int):
                    errors.append((name, f"expected integer, got {value!r}"))
                    continue
            elif want == "float":
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    errors.append((name, f"expected number, got {value!r}"))
                    continue
                value = float(value)
            kwargs[name] = value
        if errors:
            raise InvalidConfig(errors)
        return cls(**kwargs)


def validate_config(cfg: PipelineConfig) -> PipelineConfig:
    """Return ``cfg`` unchanged, or raise InvalidConfig listing every violation."""
    errors: list[tuple[str, str]] = []

    def need(ok: bool, name: str, why: str):
        if not ok:
            errors.append((name, why))

    need(cfg.window_size >= 1, "window_size", "must be >= 1")
    need(cfg.consistency_weight >= 0 and math.isfinite(cfg.consistency_weight),
         "consistency_weight", "must be finite and >= 0")
    for name in ("merge_ratio", "smoothing_alpha", "hybrid_beta", "dap_eta"):
        need(0.0 <= getattr(cfg, name) <= 1.0, name, "must lie in [0, 1]")
    need(math.isfinite(cfg.dap_tau), "dap_tau", "must be finite")
    need(cfg.dap_kmax >= 0, "dap_kmax", "must be >= 0")
    need(cfg.num_layers >= 1, "num_layers", "must be >= 1")
    need(cfg.tokens_per_frame >= 1, "tokens_per_frame", "must be >= 1")
    need(cfg.budget_total >= 1, "budget_total", "must be positive")
    need(cfg.per_layer_budget >= 0, "per_layer_budget", "must be >= 0 (0 = derive)")
    if cfg.tokens_per_frame >= 1 and cfg.num_layers >= 1:
        if cfg.per_layer_budget:
            need(cfg.per_layer_budget >= cfg.tokens_per_frame, "per_layer_budget",
                 "a single frame must fit in every layer")
        else:
            need(cfg.budget_total // cfg.num_layers >= cfg.tokens_per_frame, "budget_total",
                 "a single frame must fit in every layer")
    need(cfg.camera_tokens >= 0, "camera_tokens", "must be >= 0")
    need(cfg.register_tokens >= 0, "register_tokens", "must be >= 0")
    need(cfg.patch_tokens >= 1, "tokens_per_frame",
         "must leave at least one patch token after camera/register tokens")
    for name in ("d_model", "head_dim", "d_ff"):
        need(getattr(cfg, name) >= 1, name, "must be >= 1")
    need(cfg.ffn_scale > 0 and math.isfinite(cfg.ffn_scale), "ffn_scale", "must be finite and > 0")
    if errors:
        raise InvalidConfig(errors)
    return cfg


def layer_budgets(cfg: PipelineConfig) -> list[int]:
    """Per-layer budgets: uniform split of the total, remainder to the earliest layers."""
    if cfg.per_layer_budget:
        return [cfg.per_layer_budget] * cfg.num_layers
    base, rem = divmod(cfg.budget_total, cfg.num_layers)
    return [base + (1 if layer < rem else 0) for layer in range(cfg.num_layers)]


def patch_grid_shape(n_patches: int) -> tuple[int, int]:
    """Most square (rows, cols) factorisation with rows <= cols."""
    rows = int(math.isqrt(n_patches))
    while n_patches % rows:
        rows -= 1
    return rows, n_patches // rows


@dataclass(frozen=True)
class FrameLayout:
    """Token kinds and patch-grid positions of one frame, in token order.

    Special tokens (camera, then register) come first, followed by the patch
    grid in row-major order.
    """

    kinds: np.ndarray
    grid: np.ndarray  # (M, 2), -1 rows for non-patch tokens
    shape: tuple[int, int]

    @classmethod
    def for_config(cls, cfg: PipelineConfig) -> "FrameLayout":
        return cls.build(cfg.camera_tokens, cfg.register_tokens, cfg.patch_tokens)

    @classmethod
    def build(cls, camera: int, register: int, patches: int) -> "FrameLayout":
        rows, cols = patch_grid_shape(patches)
        kinds = np.array(
            [TokenKind.CAMERA] * camera + [TokenKind.REGISTER] * register + [TokenKind.PATCH] * patches,
            dtype=np.int8,
        )
        grid = np.full((camera + register + patches, 2), _NO_GRID, dtype=np.int64)
        rr, cc = np.divmod(np.arange(patches), cols)
        grid[camera + register:, 0] = rr
        grid[camera + register:, 1] = cc
        return cls(kinds=kinds, grid=grid, shape=(rows, cols))

    @property
    def patch_mask(self) -> np.ndarray:
        return self.kinds == TokenKind.PATCH

    def __len__(self) -> int:
        return len(self.kinds)


def save_config(cfg: PipelineConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def load_config(path) -> PipelineConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidConfig([("<file>", f"cannot read {path}: {exc}")]) from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidConfig([("<file>", f"not valid JSON: {exc}")]) from exc
    if not isinstance(data, dict):
        raise InvalidConfig([("<file>", "top level must be a flat object")])
    nested = [(k, "nested values are not allowed") for k, v in data.items() if isinstance(v, (dict, list))]
    if nested:
        raise InvalidConfig(nested)
    return validate_config(PipelineConfig.from_dict(data))
