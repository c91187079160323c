import os
from pathlib import Path

import numpy as np
import pytest

from faust.datasets import LabeledDataset, gaussian_blobs

DATA_ROOT = Path(os.environ.get("FAUST_DATA_DIR", "/root/data"))


def idx_dir(name):
    """Directory holding the four standard IDX files for ``name``, or skip."""
    d = DATA_ROOT / name
    if not (d / "train-images-idx3-ubyte").exists():
        pytest.skip(f"{name} IDX files not found under {DATA_ROOT} (set FAUST_DATA_DIR)")
    return d


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def blobs3():
    return gaussian_blobs(90, 12, 3, rng_seed=5)


@pytest.fixture
def tiny_ds():
    """Two classes, two samples each."""
    x = np.arange(4 * 5, dtype=np.float32).reshape(4, 5) / 20
    return LabeledDataset(x, np.array([0, 1, 0, 1]), 2)


ACCEPTANCE_LINES = []


def record(criterion, passed, detail):
    """Note one acceptance verdict; printed now and again in the terminal summary."""
    tag = "SKIP" if passed is None else "PASS" if passed else "FAIL"
    line = f"[{tag}] criterion {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line, flush=True)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
