import numpy as np
import pytest

from fedsynth.config import config_from_dict
from fedsynth.data import make_blobs


def small_config(**overrides):
    """Tiny but complete config for fast engine-level tests."""
    base = {
        "algorithm": "hfmds_fl",
        "dataset": {"classes": 4, "dim": 8, "per_class": 40, "spread": 0.25},
        "partition": {"scheme": "label_skew", "clients": 4, "classes_per_client": 1},
        "rounds": 4,
        "syn_interval": 2,
        "syn_per_client": 8,
        "syn_steps": 15,
        "seed": 11,
    }
    for key, value in overrides.items():
        if key in ("dataset", "partition") and isinstance(value, dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return config_from_dict(base)


@pytest.fixture
def blob_data():
    train, test = make_blobs(4, 8, 40, 0.25, seed=3)
    return train, test


@pytest.fixture
def rng():
    return np.random.default_rng(123)
