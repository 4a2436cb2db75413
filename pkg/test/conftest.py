import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

import pytest
import torch

from cohort_data import SyntheticConfig, generate_synthetic
from substrate import TrainConfig, build_model, sgd_train

# 4 forget / 4 unseen / 4 test / 8 retain identities, 4 images each
TINY_SYNTHETIC = SyntheticConfig(
    num_classes=4,
    num_identities=20,
    images_per_identity=4,
    image_shape=(3, 16, 16),
    patch_size=4,
    seed=0,
)
TINY_TRAIN = TrainConfig(learning_rate=0.01, momentum=0.9, batch_size=16, epochs=3)
FAST_FINETUNE = TrainConfig(learning_rate=0.001, momentum=0.9, batch_size=16, epochs=2)


@pytest.fixture(scope="session")
def tiny_bundle():
    return generate_synthetic(TINY_SYNTHETIC)


@pytest.fixture(scope="session")
def tiny_model(tiny_bundle):
    torch.manual_seed(0)
    model = build_model(tiny_bundle.num_classes, tiny_bundle.image_shape, init_seed=0)
    trained, _ = sgd_train(model, tiny_bundle.train, TINY_TRAIN)
    return trained


@pytest.fixture
def fresh_model(tiny_bundle):
    return build_model(tiny_bundle.num_classes, tiny_bundle.image_shape, init_seed=0)


def tiny_raw_config(output_dir, methods=("finetune", "aru"), seeds=(0, 1)):
    """Experiment config dict small enough to run in seconds."""
    return {
        "dataset": {
            "synthetic": {
                "num_classes": 4,
                "num_identities": 20,
                "images_per_identity": 4,
                "image_shape": [3, 16, 16],
                "patch_size": 4,
            }
        },
        "original": {"epochs": 2, "batch_size": 16},
        "defaults": {"finetune": {"epochs": 1, "batch_size": 16}},
        "methods": list(methods),
        "seeds": list(seeds),
        "output_dir": str(output_dir),
    }
