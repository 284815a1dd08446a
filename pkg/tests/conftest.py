import pytest
import torch

from scan_xai.data import shapes_split
from scan_xai.feature_tap import TargetModel, train_toy_targets
from scan_xai.toy_models import build_toy


@pytest.fixture(scope="session")
def tiny_split():
    return shapes_split(n_train=400, n_val=64, seed=3)


@pytest.fixture(scope="session")
def tiny_target(tiny_split):
    """A quickly trained toy CNN; good enough for plumbing, not for metrics."""
    return train_toy_targets(tiny_split.train, tiny_split.val, arch="cnn", epochs=2, seed=0)


@pytest.fixture
def untrained_cnn():
    torch.manual_seed(0)
    return TargetModel(build_toy("cnn", num_classes=3), image_side=32)


@pytest.fixture
def untrained_vit():
    torch.manual_seed(0)
    return TargetModel(build_toy("vit", num_classes=3, image_side=32, dim=32, depth=6, heads=4), image_side=32)
