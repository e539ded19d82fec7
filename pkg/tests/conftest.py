import numpy as np
import pytest

from sparseview.config import parse_config

TINY = """
views.width = 16
views.height = 16
stage1.resolution = 16
stage1.steps = 30
stage1.samples_per_ray = 24
stage2.resolution = 24
stage2.steps = 10
stage2.samples_per_ray = 24
stage2.heldout_every = 5
eval.chamfer_samples = 2000
eval.ablation_seeds = 2
fusion.n_samples = 4
"""


@pytest.fixture
def tiny_text():
    return TINY


@pytest.fixture
def tiny_cfg():
    return parse_config(TINY)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def central_difference(f, x, idx, h):
    old = x[idx]
    x[idx] = old + h
    fp = f(x)
    x[idx] = old - h
    fm = f(x)
    x[idx] = old
    return (fp - fm) / (2 * h)


def probe_indices(grad, n, rng, floor=1e-3):
    """``n`` random flat indices whose gradient is not negligible."""
    mag = np.abs(grad).ravel()
    cand = np.flatnonzero(mag > floor * mag.max())
    return [np.unravel_index(i, grad.shape) for i in rng.choice(cand, size=n, replace=False)]


def pytest_terminal_summary(terminalreporter):
    """One line per acceptance criterion, collected from ``record_property``."""
    lines = []
    for reports in terminalreporter.stats.values():
        for rep in reports:
            if getattr(rep, "when", None) == "call":
                lines += [v for k, v in getattr(rep, "user_properties", ()) if k == "acceptance"]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: float(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
