import numpy as np
import pytest
import torch

from setseg import codec as codec_mod
from setseg.shapes import ShapesConfig, gen_shapes, mask_corpus

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def shapes_dataset():
    doc, images = gen_shapes(ShapesConfig(seed=7), 20)
    return doc, images


@pytest.fixture(scope="session")
def shapes_masks(shapes_dataset):
    doc, _ = shapes_dataset
    return mask_corpus(doc, 28)


@pytest.fixture(scope="session")
def shapes_codec(shapes_masks):
    return codec_mod.fit(shapes_masks, dim=20, center=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
