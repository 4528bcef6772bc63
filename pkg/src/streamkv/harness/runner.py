"""Simulation runs, ablation sweeps and run reports."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from ..core import InvalidConfig, PipelineConfig, layer_budgets, validate_config
from ..pipeline import StreamState, process_frame, simplified_dap
from ..scoresrc import (
    FrameActivations,
    ToyModel,
    TraceWriter,
    iter_trace_frames,
    read_trace_header,
)

PER_LAYER_FIELDS = (
    "cache_size",
    "n_evictable",
    "n_retain",
    "n_merge",
    "n_evict",
    "n_protected",
    "mean_consistency",
    "reward_dispersion",
    "merge_demotions",
)


@dataclass
class RunReport:
    config_echo: dict
    per_frame: list = field(default_factory=list)
    summary: dict = field(default_factory=dict)
    seed_fingerprint: str = ""

    def canonical(self) -> dict:
        """Report contents without wall time, for equality and hashing."""
        d = asdict(self)
        d["summary"] = {k: v for k, v in d["summary"].items() if k != "wall_time"}
        return d

    def same_as(self, other: "RunReport") -> bool:
        return self.canonical() == other.canonical()

    def digest(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()

    def to_json(self, path=None) -> str:
        text = json.dumps(asdict(self), indent=2, sort_keys=True)
        if path is not None:
            Path(path).write_text(text + "\n")
        return text

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("frame", "layer") + PER_LAYER_FIELDS)
            for rec in self.per_frame:
                for layer, row in enumerate(rec["layers"]):
                    w.writerow([rec["frame"], layer] + [row[k] for k in PER_LAYER_FIELDS])


class _Fingerprint:
    def __init__(self):
        self._h = hashlib.sha256()

    def update(self, acts: Sequence[FrameActivations]) -> None:
        for a in acts:
            self._h.update(np.array([a.frame_index, a.layer_index], dtype="<u4").tobytes())
            for arr in (a.hidden, a.keys, a.values, a.raw_scores):
                self._h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())

    def hexdigest(self) -> str:
        return self._h.hexdigest()


def _summarise(state: StreamState, per_frame: list, peak: int, wall: float) -> dict:
    rows = [row for rec in per_frame for row in rec["layers"]]
    absorbed = np.concatenate([c.absorbed for c in state.caches]) if state.caches else np.zeros(0)
    targets = absorbed[absorbed > 0]
    scored = [r for r in rows if r["layer"] > 0] or rows
    return {
        "frames": len(per_frame),
        "peak_cache_tokens": peak,
        "budget_tokens": sum(c.budget for c in state.caches),
        "total_evicted": int(sum(r["n_evict"] for r in rows)),
        "total_merged": int(sum(r["n_merge"] for r in rows)),
        "total_demoted": int(sum(r["merge_demotions"] for r in rows)),
        "mean_absorbed_per_target": float(targets.mean()) if targets.size else 0.0,
        "mean_consistency": float(np.mean([r["mean_consistency"] for r in scored])) if scored else 0.0,
        "mean_reward_dispersion": float(np.mean([r["reward_dispersion"] for r in scored])) if scored else 0.0,
        "wall_time": wall,
    }


def _frame_record(state: StreamState) -> dict:
    diag = state.diagnostics[-1]
    layers = []
    for d in diag.layers:
        row = {k: getattr(d, k) for k in PER_LAYER_FIELDS}
        row["layer"] = d.layer
        row["tau_merge"] = _finite_or_none(d.tau_merge)
        row["tau_evict"] = _finite_or_none(d.tau_evict)
        layers.append(row)
    return {"frame": diag.frame, "total_cached": state.total_cached, "layers": layers}


def _finite_or_none(x: float):
    return x if np.isfinite(x) else None


def toy_frames(model: ToyModel, frames: int, state_box: list) -> Iterator[list[FrameActivations]]:
    """Closed loop: each frame is computed against the caches as they stand now."""
    for t in range(frames):
        yield model.forward_frame(t, state_box[0].caches)


def simulate(
    cfg: PipelineConfig,
    frames: Iterable[Sequence[FrameActivations]] | None = None,
    *,
    n_frames: int = 20,
    regime: str = "plain",
    record_to=None,
    protection=simplified_dap,
    threads: int | None = 1,
    keep_states: bool = False,
    capture: list | None = None,
):
    """Run the pipeline and return ``(report, final_state, states)``.

    Without ``frames`` the toy model is driven in closed loop for
    ``n_frames`` frames. ``states`` holds every post-frame state when
    ``keep_states`` is set (empty otherwise).
    """
    validate_config(cfg)
    start = time.perf_counter()
    box = [StreamState.initial(cfg)]
    if frames is None:
        frames = toy_frames(ToyModel(cfg, regime), n_frames, box)
    writer = None
    if record_to is not None:
        writer = TraceWriter(record_to, cfg.num_layers, cfg.tokens_per_frame, cfg.d_model, cfg.head_dim)
    fp = _Fingerprint()
    per_frame, states = [], []
    peak = 0
    try:
        for acts in frames:
            acts = list(acts)
            fp.update(acts)
            if capture is not None:
                capture.append(acts)
            if writer is not None:
                for a in acts:
                    writer.write(a)
            box[0] = process_frame(box[0], acts, cfg, protection=protection, threads=threads)
            peak = max(peak, box[0].total_cached)
            per_frame.append(_frame_record(box[0]))
            if keep_states:
                states.append(box[0])
    finally:
        if writer is not None:
            writer.close()
    report = RunReport(
        config_echo=cfg.to_dict(),
        per_frame=per_frame,
        summary=_summarise(box[0], per_frame, peak, time.perf_counter() - start),
        seed_fingerprint=fp.hexdigest(),
    )
    return report, box[0], states


def generate_stream(
    seed: int, frames: int, cfg: PipelineConfig, regime: str = "plain"
) -> list[list[FrameActivations]]:
    """Per-frame, per-layer activations of a toy run with ``cfg`` and ``seed``."""
    captured: list[list[FrameActivations]] = []
    simulate(cfg.replace(rng_seed=seed), n_frames=frames, regime=regime, capture=captured)
    return captured


def check_trace_matches(cfg: PipelineConfig, path) -> None:
    h = read_trace_header(path)
    want = (cfg.num_layers, cfg.tokens_per_frame, cfg.d_model, cfg.head_dim)
    got = (h.num_layers, h.tokens_per_frame, h.d_model, h.head_dim)
    if want != got:
        names = ("num_layers", "tokens_per_frame", "d_model", "head_dim")
        raise InvalidConfig(
            [(n, f"config has {w}, trace has {g}") for n, w, g in zip(names, want, got) if w != g]
        )


def run(
    cfg: PipelineConfig,
    source: str | Path = "toy",
    *,
    frames: int | None = None,
    regime: str = "plain",
    out=None,
    csv_path=None,
    threads: int | None = 1,
) -> RunReport:
    """Run the pipeline over the toy model (``source="toy"``) or a trace file."""
    cfg = validate_config(cfg)
    if str(source) == "toy":
        report, _, _ = simulate(cfg, n_frames=20 if frames is None else frames, regime=regime, threads=threads)
    else:
        check_trace_matches(cfg, source)
        stream = iter_trace_frames(source)
        if frames is not None:
            stream = (f for f, _ in zip(stream, range(frames)))
        report, _, _ = simulate(cfg, stream, threads=threads)
    if out is not None:
        report.to_json(out)
    if csv_path is not None:
        report.write_csv(csv_path)
    return report


def record(cfg: PipelineConfig, frames: int, path, *, regime: str = "plain") -> RunReport:
    """Toy run that also writes every activation record to a trace file."""
    report, _, _ = simulate(validate_config(cfg), n_frames=frames, regime=regime, record_to=path)
    return report


def replay(cfg: PipelineConfig, path, *, out=None) -> RunReport:
    return run(cfg, path, out=out)


# ------------------------------------------------------------------ sweeps

AXES = ("lambda", "window", "merge_ratio", "components")

DEFAULT_AXIS_VALUES = {
    "lambda": (0.0, 0.25, 0.5, 0.75, 1.0),
    "window": (3, 5, 7, 10),
    "merge_ratio": (0.0, 0.05, 0.1, 0.15, 0.2, 0.3),
    "components": ("none", "hcc", "clces", "both"),
}

_COMPONENTS = {"none": (False, False), "hcc": (False, True), "clces": (True, False), "both": (True, True)}


def normalise_axis(axis: str) -> str:
    axis = axis.replace("-", "_")
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}; choose from {AXES}")
    return axis


def cell_config(base: PipelineConfig, axis: str, value) -> PipelineConfig:
    axis = normalise_axis(axis)
    if axis == "lambda":
        return base.replace(consistency_weight=float(value))
    if axis == "window":
        return base.replace(window_size=int(value))
    if axis == "merge_ratio":
        return base.replace(merge_ratio=float(value))
    if value not in _COMPONENTS:
        raise ValueError(f"component cell must be one of {tuple(_COMPONENTS)}")
    use_clces, use_hcc = _COMPONENTS[value]
    lam = base.consistency_weight or 0.5
    rm = base.merge_ratio or 0.15
    return base.replace(
        consistency_weight=lam if use_clces else 0.0, merge_ratio=rm if use_hcc else 0.0
    )


@dataclass
class SweepTable:
    axis: str
    values: list
    reports: list

    def rows(self) -> list[dict]:
        out = []
        for value, rep in zip(self.values, self.reports):
            cfg = rep.config_echo
            s = rep.summary
            out.append(
                {
                    "value": value,
                    "lambda": cfg["consistency_weight"],
                    "window": cfg["window_size"] if cfg["consistency_weight"] > 0 else None,
                    "merge_ratio": cfg["merge_ratio"],
                    "total_merged": s["total_merged"],
                    "total_evicted": s["total_evicted"],
                    "peak_cache_tokens": s["peak_cache_tokens"],
                    "mean_consistency": s["mean_consistency"],
                    "mean_reward_dispersion": s["mean_reward_dispersion"],
                    "mean_absorbed_per_target": s["mean_absorbed_per_target"],
                }
            )
        return out

    def format(self) -> str:
        header = ("value", "lambda", "W", "r_m", "merged", "evicted", "peak", "mean_cons", "reward_sd", "absorbed")
        lines = ["  ".join(f"{h:>10}" for h in header)]
        for r in self.rows():
            cells = (
                r["value"], r["lambda"], "--" if r["window"] is None else r["window"], r["merge_ratio"],
                r["total_merged"], r["total_evicted"], r["peak_cache_tokens"],
                f"{r['mean_consistency']:.4f}", f"{r['mean_reward_dispersion']:.4f}",
                f"{r['mean_absorbed_per_target']:.3f}",
            )
            lines.append("  ".join(f"{str(c):>10}" for c in cells))
        return "\n".join(lines)

    def to_json(self) -> str:
        return json.dumps(
            {"axis": self.axis, "values": self.values, "rows": self.rows(),
             "reports": [asdict(r) for r in self.reports]},
            indent=2,
        )


def sweep(
    base: PipelineConfig,
    axis: str,
    values: Sequence | None = None,
    *,
    frames: int = 20,
    source: str | Path = "toy",
    regime: str = "plain",
) -> SweepTable:
    """One run per axis value, all sharing the base seed."""
    axis = normalise_axis(axis)
    values = list(DEFAULT_AXIS_VALUES[axis] if values is None else values)
    cfgs = []
    errors = []
    for v in values:
        try:
            cfgs.append(validate_config(cell_config(base, axis, v)))
        except InvalidConfig as exc:
            errors.extend((f"{axis}={v}:{name}", why) for name, why in exc.errors)
    if errors:
        raise InvalidConfig(errors)
    reports = [run(c, source, frames=frames, regime=regime) for c in cfgs]
    return SweepTable(axis, values, reports)


def budget_tokens(cfg: PipelineConfig) -> int:
    return sum(layer_budgets(cfg))
