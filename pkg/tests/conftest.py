import numpy as np
import pytest

from setseg import tensor as T

# pass/fail lines from the acceptance suite, echoed after capture ends
CRITERION_LINES: list[str] = []


def pytest_sessionfinish(session):
    if CRITERION_LINES:
        print("\nacceptance criteria:")
        for line in CRITERION_LINES:
            print(f"  {line}")


@pytest.fixture(autouse=True)
def fresh_tape():
    """Give every test its own ambient tape so entries do not pile up."""
    T.reset_ambient_tape()
    yield
    T.reset_ambient_tape()


def central_difference(fn, arrays, index, step=1e-5):
    """Numeric gradient of scalar fn w.r.t. arrays[index] (arrays are float64)."""
    base = [a.copy() for a in arrays]
    target = base[index]
    grad = np.zeros_like(target)
    it = np.nditer(target, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        orig = target[idx]
        target[idx] = orig + step
        f_plus = fn(*base)
        target[idx] = orig - step
        f_minus = fn(*base)
        target[idx] = orig
        grad[idx] = (f_plus - f_minus) / (2.0 * step)
        it.iternext()
    return grad


def max_rel_error(analytic, numeric):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(numeric).max(), np.abs(analytic).max(), 1e-8)
    return float(np.abs(analytic - numeric).max() / scale)
