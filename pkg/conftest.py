import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from core.pulses import TWO_PI, PhasePulse
from core.spin_dynamics import EnsembleSpec
from utils.logger import setup_logging

BENCHMARKS_ENABLED = os.environ.get("PULSEFORGE_RUN_BENCHMARKS") == "1"


def pytest_configure(config):
    # Keep test output readable; engines log INFO on every construction
    setup_logging(debug=False, log_level="WARNING")
    config.addinivalue_line("markers", "benchmark: full-scale runs enabled by PULSEFORGE_RUN_BENCHMARKS=1")


def pytest_collection_modifyitems(config, items):
    if BENCHMARKS_ENABLED:
        return
    skip = pytest.mark.skip(reason="set PULSEFORGE_RUN_BENCHMARKS=1 to run full-scale benchmarks")
    for item in items:
        if "benchmark" in item.keywords:
            item.add_marker(skip)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


@pytest.fixture
def tiny_spec():
    """Five isochromats over +-10 kHz, 8 slices of 5 us: about 0.31 rad of nutation per slice."""
    return EnsembleSpec.symmetric(TWO_PI * 1e4, 5, TWO_PI * 1e4, 4e-5, 8)


@pytest.fixture
def small_spec():
    """Narrower ensemble that a short pulse can invert well, for optimizer runs."""
    return EnsembleSpec.symmetric(TWO_PI * 2e3, 7, TWO_PI * 1e4, 6e-5, 24)


@pytest.fixture
def random_pulse(tiny_spec, rng):
    return PhasePulse(rng.uniform(0.0, TWO_PI, tiny_spec.n_steps))
