import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


TINY_CONFIG = """\
experiment.n_objects = 12
experiment.aliasing = false
experiment.road_length = 90
experiment.width = 128
experiment.scan_interval = 0.3
train.epochs = 2
dataset.min_views = 4
eval.attention_samples = 6
eval.overlays = 1
"""

PIPELINE = (
    ("synth", "--out", "data"),
    ("train", "--data", "data", "--out", "train"),
    ("evaluate", "--data", "data", "--out", "eval"),
)


def run_tiny_pipeline(root):
    """synth, train and evaluate on a small world under ``root``; returns exit codes."""
    from segloc.cli import main

    os.makedirs(root, exist_ok=True)
    with open(os.path.join(root, "tiny.cfg"), "w", encoding="utf-8") as f:
        f.write(TINY_CONFIG)
    cwd = os.getcwd()
    os.chdir(root)
    try:
        return [main(list(step) + ["--config", "tiny.cfg", "--threads", "1"]) for step in PIPELINE]
    finally:
        os.chdir(cwd)


@pytest.fixture(scope="session")
def tiny_runs(tmp_path_factory):
    base = tmp_path_factory.mktemp("tiny")
    runs = []
    for name in ("a", "b"):
        root = str(base / name)
        runs.append((root, run_tiny_pipeline(root)))
    return runs


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """``record(n, ok, detail)`` stores one PASS/FAIL line for the terminal summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(n, ok, detail):
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append((n, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
