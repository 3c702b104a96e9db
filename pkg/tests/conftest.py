"""
Shared fixtures: small seeded tasks and configs that train in well under a second.
"""
import os
import tempfile

os.environ.setdefault("PROMPTLAB_HOME", tempfile.mkdtemp(prefix="promptlab-tests-"))

import json

import numpy as np
import pytest

from config import RunConfig
from encoders import SyntheticTextEncoder, gen_synthetic_task


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def small_encoder():
    return SyntheticTextEncoder.from_seed(0, 8, 16)


@pytest.fixture
def small_task(small_encoder):
    return gen_synthetic_task(num_classes=4, dim=8, shots=4, noise_sigma=0.3, prototype_perturb=0.2,
                              seed=1, encoder=small_encoder, context_length=4, test_per_class=10)


@pytest.fixture
def wide_task():
    """Eight classes, four of them base, for pairing statistics."""
    encoder = SyntheticTextEncoder.from_seed(0, 8, 16)
    return gen_synthetic_task(num_classes=8, dim=8, shots=4, noise_sigma=0.3, prototype_perturb=0.2,
                              seed=2, encoder=encoder, context_length=4, test_per_class=10)


@pytest.fixture
def small_config(tmp_path):
    return RunConfig(num_classes=4, dim=8, hidden=16, shots=[2], M=4, epochs=2, batch=4,
                     mi_hidden=16, test_per_class=10, seeds=[1], methods=["coop", "ours"],
                     out_dir=str(tmp_path), shift_levels=[0.2], transfer_seeds=[101])


@pytest.fixture
def config_file(tmp_path, small_config):
    path = tmp_path / "config.json"
    data = small_config.to_dict()
    path.write_text(json.dumps(data), encoding="utf-8")
    return path
