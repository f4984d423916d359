import sys

import numpy as np
import pytest

from attsolver.data import default_sampler, generate_dataset
from attsolver.systems import harmonic_oscillator, make_system


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def spring2():
    return make_system("spring_mass", {"n_masses": 2})


@pytest.fixture(scope="session")
def small_splits(spring2):
    """Tiny spring-mass train/val/test splits on a short horizon."""
    out = {}
    for seed, split, n in ((0, "train", 12), (1, "val", 4), (2, "test", 4)):
        out[split] = generate_dataset(spring2, default_sampler(spring2, seed), n, 1e-2, 0.2, 2.0, split)
    return out


@pytest.fixture(scope="session")
def oscillator():
    return harmonic_oscillator(1.0)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(module.RESULTS, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
        terminalreporter.write_line(line)
