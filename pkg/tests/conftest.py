import numpy as np
import pytest

from plcql.nn import Mlp, SeededRng


def scratch_forward(weights, biases, x):
    """Independent forward pass: plain loops over layers, tanh between them."""
    h = np.asarray(x, dtype=np.float64)
    for i, (w, b) in enumerate(zip(weights, biases)):
        h = np.array([sum(h[r] * w[r, c] for r in range(w.shape[0])) + b[c] for c in range(w.shape[1])])
        if i < len(weights) - 1:
            h = np.tanh(h)
    return h


def finite_difference(f, params, step=1e-5):
    """Central differences of scalar ``f()`` w.r.t. every entry of every array in ``params``."""
    out = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + step
            fp = f()
            p[idx] = old - step
            fm = f()
            p[idx] = old
            g[idx] = (fp - fm) / (2 * step)
        out.append(g)
    return out


@pytest.fixture
def rng():
    return SeededRng(1234)


def random_net(seed, sizes):
    return Mlp(sizes, SeededRng(seed))


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""
    def record(label: str, ok: bool, detail: str) -> bool:
        line = f"{label}: {'PASS' if ok else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
