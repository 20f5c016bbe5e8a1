import numpy as np
import pytest

from stagsynth import Panel

ACCEPTANCE = []


def random_panel(rng, J=2, N0=3, T=8, staggered=True, scale=1.0):
    """Random panel: first ``J`` units treated, last ``N0`` never treated."""
    N = J + N0
    y = rng.normal(scale=scale, size=(N, T))
    if staggered:
        adopt = [int(a) for a in rng.integers(2, T + 1, size=J)]
    else:
        adopt = [int(rng.integers(2, T + 1))] * J
    labels = [f"t{i}" for i in range(J)] + [f"d{i}" for i in range(N0)]
    return Panel(y, adopt + [None] * N0, labels)


def random_simplex_rows(rng, gamma):
    """Random weights on each row's support, as a dense matrix."""
    W = np.zeros(gamma.weights.shape)
    for r, s in enumerate(gamma.supports):
        W[r, list(s)] = rng.dirichlet(np.ones(len(s)))
    return W


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
