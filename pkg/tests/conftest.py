import numpy as np
import pytest
import torch

from scarcebench.benchgen import build_manifest
from scarcebench.benchgen.synthetic import render, synthetic_raw


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def toy_data(tmp_path_factory):
    """Rendered 32x32 toy set: 3 base classes and 5 novel ones."""
    root = tmp_path_factory.mktemp("toy")
    raw = synthetic_raw([140, 135, 130, 40, 35, 30, 25, 20], image_size=(32, 32), objects_per_image=2, seed=3)
    raw = render(raw, root, seed=3)
    return build_manifest(raw, global_seed=0), root
