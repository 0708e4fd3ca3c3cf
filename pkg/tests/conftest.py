import numpy as np
import pytest
import torch
from hypothesis import HealthCheck, settings

from hdrsplat.datagen import SynthSpec, generate, load_dataset

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def gen():
    return torch.Generator().manual_seed(1234)


@pytest.fixture(scope="session")
def small_spec():
    return SynthSpec(n_gaussians=12, width=16, height=16, n_frames=8, n_gt=8, seed=3)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory, small_spec):
    root = tmp_path_factory.mktemp("small")
    generate(small_spec, root)
    return load_dataset(root)


def random_unit_vector(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
