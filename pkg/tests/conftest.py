import sys

import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")


def ref_forward(layers, x):
    """Plain-loop forward pass used as an oracle (no shared code with the engine)."""
    a = np.asarray(x, dtype=float)
    for W, b, act in layers:
        z = W @ a + b
        a = np.maximum(z, 0) if act == "relu" else z
    return a


def ref_ce(z, label, k=1.0):
    z = np.asarray(z, dtype=float) * k
    m = z.max()
    return float(m + np.log(np.exp(z - m).sum()) - z[label])


def as_layers(net):
    return [(l.weights, l.bias, l.activation) for l in net.layers]


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
