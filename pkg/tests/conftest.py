import numpy as np
import pytest

from opengda.graph import CsrAdjacency, LabeledGraph, make_pair
from opengda.synthetic import GeneratorSpec, generate_synthetic_pair


def numeric_grad(f, x, h=1e-5):
    """Central differences of scalar ``f()`` with respect to array ``x`` (mutated in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + h
        fp = f()
        x[idx] = orig - h
        fm = f()
        x[idx] = orig
        g[idx] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(np.abs(a).max(), np.abs(b).max(), 1e-12))


def four_node_pair():
    """4-node path source and 4-node star target, 2 known classes plus one novel class."""
    src_adj = CsrAdjacency.from_edges(4, [(0, 1), (1, 2), (2, 3)])
    tgt_adj = CsrAdjacency.from_edges(4, [(0, 1), (0, 2), (0, 3)])
    rng = np.random.default_rng(7)
    src = LabeledGraph(src_adj, rng.uniform(-1, 1, (4, 3)), np.array([0, 0, 1, 1]), 3)
    tgt = LabeledGraph(tgt_adj, rng.uniform(-1, 1, (4, 3)), np.array([0, 1, 2, 2]), 3)
    return make_pair(src, tgt, [0, 1])


@pytest.fixture
def tiny_pair():
    return four_node_pair()


@pytest.fixture(scope="session")
def small_spec():
    return GeneratorSpec(n_source=60, n_target=60, class_count=4, known_count=2, feature_dim=8,
                         p_intra=0.15, p_inter=0.02, mean_shift=0.3)


@pytest.fixture(scope="session")
def small_pair(small_spec):
    return generate_synthetic_pair(small_spec, 0)


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
