import os

import numpy as np
import pytest

from irmcal.datasets import default_mnist_dir


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    d = default_mnist_dir()
    if not os.path.exists(os.path.join(d, "train-labels-idx1-ubyte.gz")) and not os.path.exists(
            os.path.join(d, "train-labels-idx1-ubyte")):
        pytest.skip(f"MNIST IDX files not found in {d}")
    return d


# One PASS/FAIL line per acceptance criterion, printed after the test summary.
ACCEPTANCE_LINES = []


class _Criterion:
    def __init__(self):
        self.recorded = False

    def __call__(self, number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        self.recorded = True
        return passed


@pytest.fixture
def criterion(request):
    rec = _Criterion()
    yield rec
    if not rec.recorded:
        ACCEPTANCE_LINES.append(f"{request.node.name}: FAIL  did not complete")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
