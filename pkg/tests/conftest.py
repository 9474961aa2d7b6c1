import numpy as np
import pytest

from fedskew.data import LabeledDataset, gen_synthetic


def central_diff_grad(f, vec, eps=1e-5):
    """Central finite-difference gradient of scalar ``f`` at ``vec``."""
    g = np.zeros_like(vec)
    for i in range(vec.size):
        up, down = vec.copy(), vec.copy()
        up[i] += eps
        down[i] -= eps
        g[i] = (f(up) - f(down)) / (2 * eps)
    return g


@pytest.fixture
def blobs4():
    return gen_synthetic(4, 6, 50, 4.0, seed=3)


@pytest.fixture
def tiny3():
    """Three classes, 8 examples each, 3 features."""
    return gen_synthetic(3, 3, 8, 2.0, seed=11)


def make_dataset(features, labels, C):
    return LabeledDataset(np.asarray(features, float), np.asarray(labels), C)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line for the acceptance summary."""

    def record(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE_LINES.append(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
