import numpy as np
import pytest

from waveformer.tensor import Tensor, backward


def numeric_grad(f, arr, h=1e-6):
    """Central finite differences of scalar ``f()`` with respect to ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grads(build, arrays, tol=1e-6, h=1e-6):
    """``build(*tensors)`` returns a scalar Tensor; compare autograd with FD on every input."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    backward(build(*tensors))
    for t in tensors:
        fd = numeric_grad(lambda: build(*[Tensor(x.data) for x in tensors]).item(), t.data, h)
        assert rel_err(t.grad, fd) <= tol, (rel_err(t.grad, fd), t.shape)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Acceptance outcomes, printed once at the end of the run.
ACCEPTANCE: dict[int, str] = {}


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}"
    ACCEPTANCE[n] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
