import numpy as np
import pytest
import torch

import stylemark as sm

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_dataset():
    return sm.make_synthetic_dataset(60, seed=5, name="tiny")


@pytest.fixture(scope="session")
def tiny_test_dataset():
    return sm.make_synthetic_dataset(40, seed=6, split_tag="test", name="tiny-test")


@pytest.fixture(scope="session")
def default_style():
    return sm.StyleSpec(style_image=sm.make_default_style_image(), blend=1.0)


@pytest.fixture(scope="session")
def tiny_model(tiny_dataset):
    cfg = sm.TrainConfig(epochs=2, batch_size=32, learning_rate=0.05, seed=0)
    return sm.train_model(tiny_dataset, "cnn-small", cfg)


def make_image(seed=0, shape=(3, 8, 8), label=0):
    rng = np.random.default_rng(seed)
    return sm.LabeledImage(pixels=rng.random(shape).astype(np.float32), label=label)
