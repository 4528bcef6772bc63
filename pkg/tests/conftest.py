import numpy as np
import pytest

from streamkv import PipelineConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """Desk-scale config: 4 layers, 16 tokens per frame, 48-token layer budgets."""
    return PipelineConfig(
        num_layers=4,
        tokens_per_frame=16,
        per_layer_budget=48,
        camera_tokens=1,
        register_tokens=3,
        d_model=16,
        head_dim=8,
        d_ff=32,
        rng_seed=7,
    )


def pytest_terminal_summary(terminalreporter):
    """One verdict line per acceptance criterion, taken from the test outcomes."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            if "test_acceptance.py::test_criterion_" not in getattr(rep, "nodeid", ""):
                continue
            if rep.when != "call" and outcome == "passed":
                continue
            props = dict(getattr(rep, "user_properties", []))
            num = int(rep.nodeid.split("test_criterion_")[1][:2])
            verdict = "PASS" if outcome == "passed" else "FAIL"
            lines.append((num, f"criterion {num:2d} {verdict}  {props.get('title', '')}  {props.get('detail', '')}".rstrip()))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
