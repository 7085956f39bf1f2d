import os
import warnings

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from asem.nn_models import DeepConfig, TwoLayerConfig, init_network

settings.register_profile(
    "repo", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))


@pytest.fixture
def two_layer():
    def make(d=3, m=16, B=1.0, seed=0):
        return init_network("two_layer", TwoLayerConfig(d, m, B), seed)

    return make


@pytest.fixture
def deep():
    def make(d=3, m=8, H=2, B=1.0, seed=0):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            cfg = DeepConfig(d, m, H, B)
        return init_network("multi_layer", cfg, seed)

    return make


def fd_gradient(fn, w, h=1e-6):
    """Central finite differences of a scalar function of a flat vector."""
    g = np.empty_like(w)
    for i in range(w.size):
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (fn(w + e) - fn(w - e)) / (2 * h)
    return g


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
