import os
import time

import hypothesis
import numpy as np
import pytest

from est.ann import init_params, train_sgd
from est.converter import calibrate_thresholds
from est.data import gen_synthetic, split

hypothesis.settings.register_profile("ci", max_examples=50, deadline=None)
hypothesis.settings.register_profile("dev", max_examples=15, deadline=None)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "ci"))


@pytest.fixture(scope="session")
def toy():
    """3-class blobs (300 train / 300 test) and an ANN trained on them."""
    start = time.perf_counter()
    full = gen_synthetic(200, 3, 4, 8, seed=42)
    train, test = split(full, 0.5, seed=42)
    p = init_params(4, 8, 4, 3, d_ff=16, seed=42)
    history = []
    p = train_sgd(p, train, epochs=200, lr=0.05, seed=42, history=history)
    th, report = calibrate_thresholds(p, train)
    return {"params": p, "train": train, "test": test, "thresholds": th,
            "report": report, "history": history, "build_seconds": time.perf_counter() - start}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_line():
    """Record one PASS/FAIL line; printed again in the terminal summary."""

    def report(criterion: str, ok: bool, detail: str) -> None:
        line = f"{'PASS' if ok else 'FAIL'}  {criterion}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
