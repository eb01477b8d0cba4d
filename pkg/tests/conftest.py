import numpy as np
import pytest

from sgdl import recmodel as rm
from sgdl.config import RunConfig


def central_diff(f, x, h=1e-6):
    """Central finite-difference gradient of a scalar function of a flat vector."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for k in range(len(x)):
        e = np.zeros_like(x)
        e[k] = h
        g[k] = (f(x + e) - f(x - e)) / (2 * h)
    return g


def rel_err(analytic, numeric):
    """max |a - n| relative to max |n| (0 when both vanish)."""
    scale = np.max(np.abs(numeric))
    diff = np.max(np.abs(np.asarray(analytic) - np.asarray(numeric)))
    return 0.0 if scale == 0 and diff == 0 else diff / max(scale, 1e-300)


def random_params(rng, nu=4, ni=7, d=3, scale=0.7):
    p = rm.init_params(nu, ni, d, rng)
    p.U += rng.normal(0, scale, p.U.shape)
    p.V += rng.normal(0, scale, p.V.shape)
    p.global_bias = float(rng.normal(0, scale))
    return p


def pairwise_batch(rng, nu, ni, n, ids=None):
    i = rng.integers(ni, size=n)
    j = (i + 1 + rng.integers(ni - 1, size=n)) % ni
    return rm.SampleBatch(rm.PAIRWISE, rng.integers(nu, size=n), i, negs=j,
                          ids=np.arange(n) if ids is None else ids)


def pointwise_batch(rng, nu, ni, n):
    return rm.SampleBatch(rm.POINTWISE, rng.integers(nu, size=n), rng.integers(ni, size=n),
                          labels=rng.integers(2, size=n))


@pytest.fixture
def tiny_config(tmp_path):
    """A fast synthetic configuration for end-to-end tests."""
    return RunConfig(format="synthetic", synth_users=60, synth_items=80, synth_interactions=1800,
                     synth_rank=4, d=8, batch_size=64, d_w=8, d_l=8, h=2, max_epochs_phase1=3,
                     max_epochs_phase2=2, est_negatives=2, output_dir=str(tmp_path / "run"),
                     figures=False)


ACCEPTANCE_LINES = []


def record_verdict(name, ok, detail):
    """Store (and echo) one pass/fail line for the acceptance summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
