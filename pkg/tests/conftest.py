import os
from pathlib import Path

import numpy as np
import pytest

from saakrobust import datasets

MNIST_DIR = Path(os.environ.get("SAAKROBUST_MNIST_DIR", "/root/data/mnist"))
MNIST_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte",
               "t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


def mnist_available() -> bool:
    return all((MNIST_DIR / f).is_file() for f in MNIST_FILES)


requires_mnist = pytest.mark.skipif(
    not mnist_available(), reason=f"MNIST IDX files not found in {MNIST_DIR} (set SAAKROBUST_MNIST_DIR)")


@pytest.fixture(scope="session")
def mnist_test():
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    return datasets.load_idx(MNIST_DIR / MNIST_FILES[2], MNIST_DIR / MNIST_FILES[3])


@pytest.fixture(scope="session")
def mnist_train_small():
    """First 2000 training images (32x32 padded)."""
    if not mnist_available():
        pytest.skip(f"MNIST IDX files not found in {MNIST_DIR}")
    full = datasets.load_idx(MNIST_DIR / MNIST_FILES[0], MNIST_DIR / MNIST_FILES[1])
    return full.subset(np.arange(2000))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------------------
# acceptance summary: one PASS/FAIL line per criterion at the end of the session

_ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """``with acceptance(n, title) as detail:`` records PASS unless the block raises."""
    import contextlib

    results = request.config.stash.setdefault(_ACCEPTANCE_KEY, {})

    @contextlib.contextmanager
    def check(number: int, title: str):
        detail = {}
        try:
            yield detail
        except BaseException as exc:
            msg = str(exc).strip().splitlines()[0] if str(exc).strip() else type(exc).__name__
            results[number] = (title, "FAIL", detail, msg)
            raise
        results[number] = (title, "PASS", detail, "")

    return check


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_ACCEPTANCE_KEY, {})
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        title, status, detail, msg = results[number]
        info = ", ".join(f"{k}={v}" for k, v in detail.items())
        line = f"criterion {number:>2} {status}: {title}"
        if info:
            line += f" [{info}]"
        if msg:
            line += f" -- {msg}"
        terminalreporter.write_line(line)
