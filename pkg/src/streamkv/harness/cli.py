"""Command-line simulator.

    streamkv run    --config cfg.json [--trace t.skvt] [--frames T] [--seed S] [--out r.json] [--csv s.csv]
    streamkv sweep  --config cfg.json --axis {lambda|window|merge-ratio|components} --values v1,v2 [--out dir]
    streamkv record --config cfg.json --frames T --seed S --out trace.skvt
    streamkv replay --trace trace.skvt --config cfg.json --out r.json

Exit codes: 0 ok, 2 config error, 3 trace format error, 4 pipeline error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from ..core import InvalidConfig, StreamKVError, load_config
from ..pipeline import resolve_threads
from ..scoresrc import REGIMES, TraceFormatError
from . import runner

EXIT_OK, EXIT_CONFIG, EXIT_TRACE, EXIT_RUNTIME = 0, 2, 3, 4


def _config(args):
    cfg = load_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(rng_seed=args.seed)
    return cfg


def _summary_line(report: runner.RunReport) -> str:
    s = report.summary
    return (
        f"frames={s['frames']} peak={s['peak_cache_tokens']}/{s['budget_tokens']} "
        f"evicted={s['total_evicted']} merged={s['total_merged']} "
        f"mean_cons={s['mean_consistency']:.4f} wall={s['wall_time']:.2f}s"
    )


def cmd_run(args) -> int:
    cfg = _config(args)
    source = args.trace if args.trace else "toy"
    report = runner.run(
        cfg, source, frames=args.frames, regime=args.regime, out=args.out,
        csv_path=args.csv, threads=resolve_threads(None),
    )
    print(_summary_line(report))
    return EXIT_OK


def _parse_values(axis: str, text: str | None):
    if text is None:
        return None
    items = [v.strip() for v in text.split(",") if v.strip()]
    if axis == "components":
        return items
    if axis == "window":
        return [int(v) for v in items]
    return [float(v) for v in items]


def cmd_sweep(args) -> int:
    cfg = _config(args)
    axis = runner.normalise_axis(args.axis)
    try:
        values = _parse_values(axis, args.values)
    except ValueError as exc:
        raise InvalidConfig([("--values", str(exc))]) from exc
    table = runner.sweep(cfg, axis, values, frames=args.frames, regime=args.regime)
    text = table.format()
    print(text)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "table.txt").write_text(text + "\n")
        (out / "sweep.json").write_text(table.to_json() + "\n")
        for value, rep in zip(table.values, table.reports):
            rep.to_json(out / f"{axis}_{value}.json")
    return EXIT_OK


def cmd_record(args) -> int:
    cfg = _config(args)
    report = runner.record(cfg, args.frames, args.out, regime=args.regime)
    print(_summary_line(report))
    return EXIT_OK


def cmd_replay(args) -> int:
    cfg = _config(args)
    report = runner.replay(cfg, args.trace, out=args.out)
    print(_summary_line(report))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="streamkv", description="Streaming KV-cache compression simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate over the toy model or a recorded trace")
    r.add_argument("--config", required=True)
    r.add_argument("--trace")
    r.add_argument("--frames", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--regime", choices=REGIMES, default="plain")
    r.add_argument("--out")
    r.add_argument("--csv")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="ablation sweep along one axis")
    s.add_argument("--config", required=True)
    s.add_argument("--axis", required=True, choices=["lambda", "window", "merge-ratio", "components"])
    s.add_argument("--values")
    s.add_argument("--frames", type=int, default=20)
    s.add_argument("--seed", type=int)
    s.add_argument("--regime", choices=REGIMES, default="plain")
    s.add_argument("--out")
    s.set_defaults(func=cmd_sweep)

    rec = sub.add_parser("record", help="run the toy model and save its activations")
    rec.add_argument("--config", required=True)
    rec.add_argument("--frames", type=int, required=True)
    rec.add_argument("--seed", type=int, required=True)
    rec.add_argument("--regime", choices=REGIMES, default="plain")
    rec.add_argument("--out", required=True)
    rec.set_defaults(func=cmd_record)

    rp = sub.add_parser("replay", help="run the pipeline over a recorded trace")
    rp.add_argument("--trace", required=True)
    rp.add_argument("--config", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InvalidConfig as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceFormatError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE
    except (StreamKVError, ValueError) as exc:
        print(f"pipeline error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        # config files are read through load_config, so this is the trace side
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE


if __name__ == "__main__":
    sys.exit(main())
