import numpy as np
import pytest

from cmanp import numerics as nx


def central_diff(f, arrays, h=1e-5):
    """Numerical gradient of scalar ``f(*arrays)`` with respect to every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = a[idx]
            a[idx] = old + h
            fp = f(*arrays)
            a[idx] = old - h
            fm = f(*arrays)
            a[idx] = old
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def autodiff(f, arrays):
    leaves = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
    return nx.grad(f(*leaves), leaves)


def max_rel_err(a, b, floor=1e-5):
    """Largest entry error relative to the largest gradient entry of the array.

    ``floor`` keeps structurally zero gradients (e.g. key biases, to which a
    softmax is blind) from dividing finite-difference round-off by zero.
    """
    scale = max(float(np.abs(a).max()), float(np.abs(b).max()), floor)
    return float(np.abs(a - b).max()) / scale


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdicts, printed once at the end of the session
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
