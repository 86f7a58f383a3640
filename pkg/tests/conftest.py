import numpy as np
import pytest

from pueva import kernels
from pueva.engine import DiffArray, Tape

BACKENDS = [kernels.python_backend] + ([kernels.compiled_backend] if kernels.compiled_backend else [])


@pytest.fixture(params=BACKENDS, ids=lambda m: m.BACKEND)
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x``."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def check_grads(build, arrays, h=1e-5):
    """Max relative error between tape gradients and central differences.

    ``build(*DiffArrays)`` must return a scalar DiffArray.
    """
    leaves = [DiffArray(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = build(*leaves)
        tape.backward(out)
    worst = 0.0
    for i, leaf in enumerate(leaves):
        def f(x, i=i):
            args = [DiffArray(a) for a in arrays]
            args[i] = DiffArray(x)
            return float(build(*args).data)

        num = numeric_grad(f, arrays[i].copy(), h)
        worst = max(worst, rel_error(leaf.grad, num))
    return worst


# one line per acceptance criterion, filled in by test_acceptance and printed after the run
ACCEPTANCE: dict[str, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
