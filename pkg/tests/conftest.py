import numpy as np
import pytest

from wmlab.attack import train_shrinkage, training_recipe_specs
from wmlab.imagecore import save_image

import synthdata

TRAIN_SEED = 3
TRAIN_IMAGE_SEEDS = range(24)
EVAL_IMAGE_BASE = 1000


@pytest.fixture(scope="session")
def train_images():
    return [synthdata.natural_image(s) for s in TRAIN_IMAGE_SEEDS]


@pytest.fixture(scope="session")
def trained_model(train_images):
    return train_shrinkage(train_images, training_recipe_specs(), epochs=200, seed=TRAIN_SEED)


@pytest.fixture(scope="session")
def eval_images():
    """20 evaluation images, disjoint from the training seeds."""
    return [synthdata.natural_image(EVAL_IMAGE_BASE + s) for s in range(20)]


@pytest.fixture(scope="session")
def dataset_dir(tmp_path_factory):
    """Directory of 24 PNGs for ingestion/bench/train tests."""
    root = tmp_path_factory.mktemp("dataset")
    for i in range(24):
        save_image(synthdata.natural_image(2000 + i, size=192), root / f"img_{i:03d}.png")
    return root


@pytest.fixture()
def rng():
    return np.random.default_rng(707)
