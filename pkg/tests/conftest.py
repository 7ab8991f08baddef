import numpy as np
import pytest

from relgnn import numeric as nm


@pytest.fixture
def rng():
    return np.random.default_rng(20240501)


def leaf(data):
    return nm.Tensor(data, requires_grad=True)


def numeric_grad(fn, x, eps=1e-4):
    """Central differences of scalar ``fn()`` w.r.t. every element of array ``x`` (in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = fn()
        flat[i] = orig - eps
        fm = fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * eps)
    return g


def check_op_grads(build, inputs, weights=None, eps=1e-4, tol=1e-5):
    """Gradient-check ``sum(weights * build(*inputs))`` w.r.t. every input tensor."""
    out0 = build(*inputs)
    if weights is None:
        weights = np.random.default_rng(7).uniform(-1, 1, out0.shape)
    for t in inputs:
        t.grad = None
    with nm.Tape() as tape:
        out = build(*inputs)
    tape.backward(out, seed=weights)
    for t in inputs:
        if not t.requires_grad:
            continue
        num = numeric_grad(lambda: float(np.sum(weights * build(*inputs).data)), t.data, eps)
        err = nm.relative_error(t.grad, num).max()
        assert err <= tol, f"{t.name or t.shape}: rel err {err}"


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import LINES
    if LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
