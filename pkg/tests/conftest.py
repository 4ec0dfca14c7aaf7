import numpy as np
import pytest

import network
import service
from models import ModelConfig, SynthRunConfig, TrainRunConfig


def set_identity(kernel):
    kernel.data[:] = 0.0
    channels = min(kernel.shape[0], kernel.shape[1])
    for channel in range(channels):
        kernel.data[channel, channel, 1, 1] = 1.0


def brightness_model(size: int = 32, nodule: bool = True) -> network.Model:
    # identity convs: the NAM is the 2x max-pooled image, upsampled; the fc bias forces the class
    config = ModelConfig(input_size=(size, size), stage_channels=[1], gap_taps=[0], head_channels=1)
    model = network.build(config, seed=0)
    for stage in model.stages:
        for kernel, bias in stage:
            set_identity(kernel)
            bias.data[:] = 0.0
    for kernel, bias in model.heads:
        set_identity(kernel)
        bias.data[:] = 0.0
    model.fc_weight.data[:] = [[0.0], [1.0]]
    model.fc_bias.data[:] = [-100.0, 0.0] if nodule else [100.0, 0.0]
    return model


def disc(shape, center, radius):
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    return np.hypot(rows - center[0], cols - center[1]) <= radius


def gaussian_bump(shape, center, sigma, height=1.0):
    rows, cols = np.mgrid[0:shape[0], 0:shape[1]]
    return height * np.exp(-((rows - center[0]) ** 2 + (cols - center[1]) ** 2) / (2 * sigma ** 2))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return ModelConfig(input_size=(8, 8), stage_channels=[4, 8], gap_taps=[1], head_channels=4)


@pytest.fixture
def bright_model():
    return brightness_model()


@pytest.fixture(autouse=True)
def log_dir(tmp_path, monkeypatch):
    # CLI runs keep pytest's log capture instead of loading logging.yaml
    monkeypatch.setenv("NAMSEG_LOG_DIR", str(tmp_path / "log"))
    monkeypatch.setenv("NAMSEG_LOG_CONFIG", str(tmp_path / "no-logging.yaml"))
    return tmp_path / "log"


@pytest.fixture(scope="session")
def synth_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("synth")
    service.cmd_synth(SynthRunConfig(
        seed=7, out=out, pos=18, neg=18, image_size=16, radius_min=2.0, radius_max=4.0, decoy_rate=0.3,
    ))
    return out


@pytest.fixture(scope="session")
def trained_dir(synth_dir, tmp_path_factory):
    out = tmp_path_factory.mktemp("train")
    service.cmd_train(TrainRunConfig(
        data=synth_dir, out=out, seed=3, stage_channels=[2, 4], gap_taps=[1], head_channels=4, epochs=2,
        batch_size=6,
    ))
    return out
