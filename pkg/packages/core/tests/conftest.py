import pytest
import torch

from lare2_core.config import TrainConfig
from lare2_core.denoiser import Denoiser
from lare2_core.forge import synth_real, write_corpus
from pipeline_helpers import run_pipeline


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run acceptance-scale experiments")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


class ZeroDenoiser(Denoiser):
    """Predicts no noise at all."""

    def __init__(self):
        super().__init__()
        self.anchor = torch.nn.Parameter(torch.zeros(()))

    def forward(self, x_t, t):
        return torch.zeros_like(x_t)


class ScaledDenoiser(Denoiser):
    """eps_theta(x, t) = scale * x, a closed-form stand-in."""

    def __init__(self, scale: float = 0.5):
        super().__init__()
        self.scale = torch.nn.Parameter(torch.tensor(scale))

    def forward(self, x_t, t):
        return self.scale.to(x_t.dtype) * x_t


@pytest.fixture
def make_corpus(tmp_path):
    """Writes forge images of a given size and returns a real-only manifest."""

    def build(count: int = 32, size: int = 16, seed: int = 0, prefix: str = "real"):
        items = synth_real(count, seed, size=size, prefix=prefix)
        return write_corpus(items, tmp_path, label=0, generator="real", split_seed=seed)

    return build


@pytest.fixture
def zero_denoiser():
    return ZeroDenoiser()


@pytest.fixture
def scaled_denoiser():
    return ScaledDenoiser()


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    """Every model trained from scratch at the default config. Slow tests only."""
    return run_pipeline(tmp_path_factory.mktemp("pipeline"), TrainConfig(), seed=0)
