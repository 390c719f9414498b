import numpy as np
import pytest
import torch

from metadip.networks import DipNetConfig, LatentInput, ParameterSet, build_network, make_latent

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class ScalarNet:
    """f(theta) = scale * theta as a 1x1x1 image."""

    def __init__(self, scale=1.0):
        self.scale = scale

    def __call__(self, params, latent, jitter=None):
        return (params["theta.weight"] * self.scale).reshape(1, 1, 1)


def scalar_params(value, dtype=torch.float64):
    return ParameterSet({"theta.weight": torch.tensor([float(value)], dtype=dtype)})


def empty_latent():
    return LatentInput(np.zeros((0, 1, 1)), np.zeros((0, 2)))


TINY_DIP = DipNetConfig(
    latent_channels=1, num_fourier_features=1, fourier_scale=1.0, channels=(2,), skip_channels=(1,), out_channels=1
)
SMALL_DIP = DipNetConfig(
    latent_channels=2, num_fourier_features=2, fourier_scale=2.0, channels=(4, 4), skip_channels=(2, 2), out_channels=1
)


@pytest.fixture
def tiny_dip():
    net, params = build_network(TINY_DIP, seed=3, dtype=torch.float64)
    return net, params, make_latent(TINY_DIP, 4, 4, seed=3)


@pytest.fixture
def small_dip():
    net, params = build_network(SMALL_DIP, seed=1, dtype=torch.float64)
    return net, params, make_latent(SMALL_DIP, 8, 8, seed=1)


def central_difference(f, x: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of scalar ``f`` at flat ``x``."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
