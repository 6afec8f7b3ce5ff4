import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from monosae import sae  # noqa: E402

REPO = Path(__file__).resolve().parents[1]


def random_params(rng, d, m, scale=0.5):
    return sae.SaeParams(
        w_enc=rng.standard_normal((m, d)) * scale,
        w_dec=rng.standard_normal((d, m)) * scale,
        b_pre=rng.standard_normal(d) * 0.1,
        b_enc=rng.standard_normal(m) * 0.1,
    )


def kink_free_instance(seed, d=6, m=12, n=4, margin=1e-3):
    """Random params and batch whose pre-activations all sit at least ``margin`` from 0."""
    rng = np.random.default_rng(seed)
    while True:
        p = random_params(rng, d, m)
        x = rng.standard_normal((n, d))
        if np.abs(sae.preactivations(p, x)).min() >= margin:
            return p, x


@pytest.fixture
def repo():
    return REPO


ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    """Record and print one PASS/FAIL line for an acceptance criterion, then assert it."""

    def check(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  ({detail})" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return check


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
