import numpy as np
import pytest

from vgse import tensor as T
from vgse.tensor import Tensor

FD_STEP = 1e-5


def numerical_grad(fn, arrays, h=FD_STEP):
    """Central differences of the scalar ``fn(*tensors)`` wrt every array entry."""
    grads = []
    for k, base in enumerate(arrays):
        g = np.zeros_like(base)
        for idx in np.ndindex(base.shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[k][idx] += h
            minus[k][idx] -= h
            with T.no_grad():
                fp = fn(*[Tensor(a) for a in plus]).item()
                fm = fn(*[Tensor(a) for a in minus]).item()
            g[idx] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def analytic_grad(fn, arrays):
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(fn(*leaves), leaves)
    return [leaf.grad for leaf in leaves]


def rel_err(a, b):
    a = np.concatenate([x.ravel() for x in a])
    b = np.concatenate([x.ravel() for x in b])
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return np.linalg.norm(a - b) / scale


def gradcheck(fn, arrays, h=FD_STEP):
    """Relative error between backward and central differences."""
    arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
    return rel_err(analytic_grad(fn, arrays), numerical_grad(fn, arrays, h))


def projected(op, out_shape, seed=0):
    """Wrap a tensor-valued op into a scalar by a fixed random projection."""
    weights = Tensor(np.random.default_rng(seed).uniform(-1, 1, size=out_shape))
    return lambda *xs: T.sum(T.mul(op(*xs), weights))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance outcomes, filled by test_acceptance and echoed after the run
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:>2} {'PASS' if passed else 'FAIL'}  {title}: {detail}")
