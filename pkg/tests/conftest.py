import numpy as np
import pytest

from faultfit.data import write_idx


@pytest.fixture(scope="session")
def tiny_idx(tmp_path_factory):
    """Blob-like 28x28 images written as IDX files: (train_path, test_path)."""
    root = tmp_path_factory.mktemp("idx")
    rng = np.random.default_rng(1234)
    yy, xx = np.mgrid[:28, :28]

    def images(n):
        cy, cx = rng.uniform(8, 20, size=(2, n, 1, 1))
        r = rng.uniform(3, 7, size=(n, 1, 1))
        blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r ** 2))
        return np.round(255 * blob).astype(np.uint8)

    train, test = root / "train-images-idx3-ubyte", root / "t10k-images-idx3-ubyte"
    write_idx(train, images(240))
    write_idx(test, images(60))
    return train, test


# acceptance reporting: each criterion records one line, printed after the run

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str) -> bool:
        lines.append((number, f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
