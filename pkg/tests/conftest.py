import numpy as np
import pytest

from fedx.data import Dataset, make_synthetic_images


def central_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Numerical gradient of scalar ``f`` at ``x`` (x is perturbed in place and restored)."""
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        keep = x[i]
        x[i] = keep + step
        up = f()
        x[i] = keep - step
        down = f()
        x[i] = keep
        grad[i] = (up - down) / (2 * step)
    return grad


def max_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
    return float((np.abs(analytic - numeric) / scale).max())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny_images() -> Dataset:
    return make_synthetic_images(240, class_count=4, channels=1, size=4, seed=3)


def random_dataset(count=20, shape=(2, 3, 3), classes=5, seed=0) -> Dataset:
    r = np.random.default_rng(seed)
    return Dataset(r.random((count, *shape), dtype=np.float32), r.integers(0, classes, count),
                   classes)


# -- acceptance reporting --------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"CRITERION {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
