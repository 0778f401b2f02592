import numpy as np
import pytest

from unisa.oracles import central_difference, relative_error
from unisa.tensor import Graph


def fd_check(build, arrays: dict, h: float = 1e-5):
    """Compare reverse-mode gradients of ``build(graph, params)`` with central differences.

    ``arrays`` maps parameter names to starting values. Returns the worst relative error.
    """
    g = Graph()
    params = {k: g.param(k, v) for k, v in arrays.items()}
    root = build(g, params)
    grads = g.gradient(root, list(arrays))
    worst = 0.0
    for name, value in arrays.items():
        def f(v, name=name):
            g2 = Graph()
            p2 = {k: g2.param(k, v if k == name else arrays[k]) for k in arrays}
            return float(g2.evaluate(build(g2, p2)))
        worst = max(worst, relative_error(grads[name], central_difference(f, value, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
