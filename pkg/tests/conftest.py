import numpy as np
import pytest
import torch

from avwws.data import SynthConfig, generate_synthetic_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """Small synthetic corpus shared across tests."""
    out = tmp_path_factory.mktemp("tiny")
    cfg = SynthConfig(n_train_pos=6, n_train_neg=10, n_dev_pos=4, n_dev_neg=4, n_eval_pos=2,
                      n_eval_neg=2, seed=3, n_noise_files=2)
    manifests = generate_synthetic_dataset(cfg, out)
    return out, manifests


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
