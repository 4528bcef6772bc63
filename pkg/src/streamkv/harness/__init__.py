"""Simulation harness: runs, sweeps, record/replay, reports and the CLI."""

from .runner import (
    AXES,
    DEFAULT_AXIS_VALUES,
    RunReport,
    SweepTable,
    cell_config,
    generate_stream,
    record,
    replay,
    run,
    simulate,
    sweep,
)

__all__ = [
    "AXES",
    "DEFAULT_AXIS_VALUES",
    "RunReport",
    "SweepTable",
    "cell_config",
    "generate_stream",
    "record",
    "replay",
    "run",
    "simulate",
    "sweep",
]
