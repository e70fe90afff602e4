import numpy as np
import pytest

from rrnorm import synth
from rrnorm.raster import quantize_pair


def coded_scene(**kw):
    """Synthetic scene quantized the way the CLI does it; returns (codes_pair, truth)."""
    pair, truth = synth.generate(synth.SceneSpec(**kw))
    codes, _, _ = quantize_pair(pair)
    return codes, truth


def iou(a, b):
    a, b = np.asarray(a, bool), np.asarray(b, bool)
    union = (a | b).sum()
    return (a & b).sum() / union if union else 1.0


@pytest.fixture(scope="session")
def small_cloud_scene():
    return coded_scene(size=96, change_fraction=0.12, seed=7)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Log one acceptance line; the summary hook prints them after the run."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for key in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[key])
