import sys

import numpy as np
import pytest

from unic import tensor as T


def numeric_grad(f, x, h=1e-5):
    """Central differences of a scalar numpy-valued function of an array."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def autodiff_grad(f, x):
    xt = T.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    T.backward(f(xt))
    return xt.grad


def max_rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


def compare_to_fd(f, x, h=1e-5):
    """Relative error between autodiff and central differences for Tensor -> scalar f."""
    with_fd = numeric_grad(lambda arr: f(T.Tensor(arr)).item(), x, h)
    return max_rel_err(autodiff_grad(f, x), with_fd)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """Repeat the acceptance PASS/FAIL lines, one per criterion."""
    module = sys.modules.get("test_acceptance")
    if module is None:
        return
    terminalreporter.section("acceptance criteria")
    for number in range(1, 12):
        line = module.RESULTS.get(number, f"[FAIL] criterion {number:>2}: not run or did not finish")
        terminalreporter.write_line(line)
