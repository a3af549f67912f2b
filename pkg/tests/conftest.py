import pytest
import torch

from styleret.encoder import Backbone, BackboneConfig
from styleret.prototype import PrototypeEncoder
from styleret.synthdata import DataConfig, build_dataset

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def small_dataset():
    return build_dataset(DataConfig(num_classes=4, instances_per_class=4, seed=3))


@pytest.fixture(scope="session")
def default_dataset():
    return build_dataset(DataConfig())


@pytest.fixture
def tiny_backbone():
    return Backbone(BackboneConfig(layers=2, d=16, heads=2, seed=5)).freeze()


@pytest.fixture(scope="session")
def enc16():
    return PrototypeEncoder(d=16, seed=2)
