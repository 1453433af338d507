import numpy as np
import pytest

from cfkit.backends.synthetic import SyntheticWorld
from cfkit.backends.toy import (
    ToyAffineGenerator,
    ToyCaptioner,
    ToyJointEncoder,
    ToyLinearClassifier,
    ToyPerturber,
    ToySentenceEmbedder,
)
from cfkit.types import ImageTensor


@pytest.fixture(scope="session")
def world():
    return SyntheticWorld(seed=0)


@pytest.fixture(scope="session")
def captioner(world):
    return ToyCaptioner(world, seed=0)


@pytest.fixture(scope="session")
def perturber(world):
    return ToyPerturber(world, seed=0)


@pytest.fixture(scope="session")
def embedder():
    return ToySentenceEmbedder(seed=0)


@pytest.fixture(scope="session")
def encoder(world):
    return ToyJointEncoder(world, seed=0)


@pytest.fixture()
def generator(world):
    return ToyAffineGenerator(world, seed=0, num_steps=10)


@pytest.fixture()
def classifier(world):
    return ToyLinearClassifier(world.image_size, tuple(world.classes), seed=0)


@pytest.fixture(scope="session")
def sample_image(world):
    rng = np.random.default_rng(7)
    cls = world.classes[0]
    return ImageTensor(world.make_image(cls, world.class_color[cls], rng), "img-7")
