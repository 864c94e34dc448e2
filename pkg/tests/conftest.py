import numpy as np
import pytest

from ltgcd.config import TrainConfig
from ltgcd.data import ImbalanceProfile, synth_dataset

# Small, fast training setup shared by trainer/cli tests.
QUICK = {
    "C": 4, "n_max": 80, "rho": 8, "d": 8, "sep": 10, "n_known": 2, "test_per_class": 30,
    "hidden": 16, "dz": 8, "batch_size": 32, "queue_size": 64, "lr": 0.3, "momentum": 0.9,
    "stage1_epochs": 3, "stage2_epochs": 2, "T1": 2, "T2": 1, "K": 3, "kmeans_restarts": 5,
    "cluster_iters": 20, "sinkhorn_iters": 30,
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def quick_cfg():
    return TrainConfig().with_overrides(QUICK)


def dataset_for(cfg):
    profile = ImbalanceProfile(cfg.profile, cfg.rho, cfg.C, cfg.n_max)
    return synth_dataset(profile, cfg.d, cfg.sep, cfg.data_seed, cfg.n_known,
                         cfg.known_select, cfg.test_per_class, cfg.sigma)


@pytest.fixture
def quick_ds(quick_cfg):
    return dataset_for(quick_cfg)
