import os
from pathlib import Path

import numpy as np
import pytest

from fedtan.datasets import DATA_DIR_ENV, MNIST_FILES

MNIST_DIR = Path(os.environ.get(DATA_DIR_ENV, "/root/data/mnist"))


def mnist_available() -> bool:
    return all((MNIST_DIR / f).is_file() for pair in MNIST_FILES.values() for f in pair)


requires_mnist = pytest.mark.skipif(not mnist_available(),
                                    reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, title: str, passed: bool, detail: str) -> None:
    line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
