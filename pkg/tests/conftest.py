import numpy as np
import pytest

from nettrim.network import Layer, Network

# filled by tests/test_acceptance.py, printed at the end of the run
ACCEPTANCE_LINES = {}


def random_net(rng, dims, bias=True, final_activation=True):
    layers = []
    depth = len(dims) - 1
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        w = rng.standard_normal((a, b))
        bvec = 0.1 * rng.standard_normal(b) if bias else None
        layers.append(Layer(w, bvec, final_activation or i < depth - 1))
    return Network(tuple(layers))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_collection_modifyitems(items):
    # the oracle-equivalence gate runs before everything else
    first = [i for i in items if i.name == "test_02_oracle_equivalence"]
    items[:] = first + [i for i in items if i not in first]


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[k])
