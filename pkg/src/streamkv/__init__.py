"""Bounded-memory streaming KV-cache compression.

Cross-layer rank-consistency scoring feeds a retain / merge / evict cache
triage that keeps every layer's cache under a hard token budget.
"""

from .clces import (
    ConsistencyReport,
    RankWindow,
    compute_ranks,
    consistency,
    enhance_scores,
    normalize_ranks,
    push_layer,
    reset_window,
)
from .core import (
    DimensionMismatch,
    FrameLayout,
    InvalidConfig,
    LayerCache,
    PipelineConfig,
    StreamKVError,
    TokenKind,
    TokenRecord,
    layer_budgets,
    load_config,
    save_config,
    validate_config,
)
from .hcc import TriageResult, compress_layer, fuse, nn_assign, triage
from .pipeline import (
    StreamState,
    dap_protect,
    gaussian_smooth,
    hybrid_score,
    process_frame,
    run_stream,
)
from .scoresrc import (
    FrameActivations,
    ToyBlockParams,
    ToyModel,
    ffn_residual_score,
    load_trace,
    save_trace,
    toy_block_forward,
)

__all__ = [
    "ConsistencyReport",
    "RankWindow",
    "compute_ranks",
    "consistency",
    "enhance_scores",
    "normalize_ranks",
    "push_layer",
    "reset_window",
    "DimensionMismatch",
    "FrameLayout",
    "InvalidConfig",
    "LayerCache",
    "PipelineConfig",
    "StreamKVError",
    "TokenKind",
    "TokenRecord",
    "layer_budgets",
    "load_config",
    "save_config",
    "validate_config",
    "StreamState",
    "dap_protect",
    "gaussian_smooth",
    "hybrid_score",
    "process_frame",
    "run_stream",
    "FrameActivations",
    "ToyBlockParams",
    "ToyModel",
    "ffn_residual_score",
    "load_trace",
    "save_trace",
    "toy_block_forward",
    "TriageResult",
    "compress_layer",
    "fuse",
    "nn_assign",
    "triage",
]

__version__ = "0.1.0"
