import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from qwt.netgraph import ArchConfig, build_network
from qwt.pipeline import DatasetConfig, TrainConfig, make_dataset, quantize_model, sample_calibration, train_toy
from qwt.quantizer import QuantScheme

settings.register_profile("default", deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SMALL_ARCHS = {
    "mlp": ArchConfig("mlp", depth=2, width=16, classes=4, input_dim=8),
    "mini_transformer": ArchConfig("mini_transformer", depth=2, width=16, heads=4, seq_len=5, classes=4, input_dim=8),
    "conv1x1_resnet": ArchConfig("conv1x1_resnet", depth=2, width=16, classes=4, input_dim=8, positions=3),
}


@pytest.fixture(scope="session")
def small_data():
    return make_dataset(DatasetConfig(classes=4, dim=8, n_train=600, n_test=200, seed=3))


@pytest.fixture(scope="session")
def trained_small(small_data):
    """One briefly trained FP network per architecture."""
    return {arch: train_toy(build_network(cfg, 1), small_data, TrainConfig(epochs=2, lr=0.02, seed=1))
            for arch, cfg in SMALL_ARCHS.items()}


@pytest.fixture(scope="session")
def quantized_small(trained_small, small_data):
    calib = sample_calibration(small_data, 128, 0)
    return {arch: quantize_model(net, QuantScheme(4, 4), calib) for arch, net in trained_small.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
