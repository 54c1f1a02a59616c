import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fgrad.models import attach_auxiliaries, build_backbone

settings.register_profile("default", max_examples=25, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


def report(number, name, passed, detail):
    """Record one acceptance line; printed again in the terminal summary."""
    line = f"C{number} {name}: {'PASS' if passed else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def tiny_net(seed=0, dtype="float64", aux="cnn", classes=4, shape=(1, 8, 8)):
    net = build_backbone("micro4", input_shape=shape, class_count=classes, seed=seed, dtype=dtype)
    if aux:
        attach_auxiliaries(net, aux, h_chan=3, n_depth=2, seed=seed)
    return net


def tiny_batch(seed=0, n=5, classes=4, shape=(1, 8, 8), dtype=np.float64):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((n,) + shape).astype(dtype), rng.integers(0, classes, n)


@pytest.fixture
def net64():
    return tiny_net()


@pytest.fixture
def batch64():
    return tiny_batch()
