import numpy as np
import pytest

from stts_lab import autodiff as ad


def finite_difference(fn, arrays, weights, h=1e-3):
    """Central differences of sum(fn(*arrays) * weights) w.r.t. every input entry."""
    grads = []
    for a in arrays:
        g = np.zeros(a.shape, dtype=np.float64)
        flat = a.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + h
            up = _weighted(fn, arrays, weights)
            flat[j] = old - h
            dn = _weighted(fn, arrays, weights)
            flat[j] = old
            g.reshape(-1)[j] = (up - dn) / (2 * h)
        grads.append(g)
    return grads


def _weighted(fn, arrays, weights):
    out = fn(*[ad.Tensor(a) for a in arrays])
    return float((out.data.astype(np.float64) * weights).sum())


def analytic_gradient(fn, arrays, weights):
    ts = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        out = fn(*ts)
    tape.backward(out, grad=weights.astype(np.float32))
    return [t.grad.astype(np.float64) if t.grad is not None else np.zeros(t.shape) for t in ts]


def rel_error(a, b):
    a = np.concatenate([np.ravel(x) for x in a])
    b = np.concatenate([np.ravel(x) for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


def gradcheck(fn, shapes, seed, h=1e-3, low=-1.0, high=1.0):
    """Relative error between tape gradients and central differences, one seeded case."""
    rng = np.random.default_rng(seed)
    arrays = [rng.uniform(low, high, s).astype(np.float32) for s in shapes]
    out = fn(*[ad.Tensor(a) for a in arrays])
    weights = rng.uniform(-1, 1, out.shape)
    return rel_error(analytic_gradient(fn, arrays, weights), finite_difference(fn, arrays, weights, h))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, echoed in the terminal summary so it survives output capture
CRITERIA_LINES = []


def record_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"CRITERION {number}: {'PASS' if passed else 'FAIL'} - {detail}"
    CRITERIA_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(CRITERIA_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
