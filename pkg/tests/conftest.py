import numpy as np
import pytest

from deltaiss.dynamics import Box, DiscreteSystem, make_dc_motor, make_scalar_decay
from deltaiss.lipschitz import KTemplate
from deltaiss.network import LyapunovNet


@pytest.fixture
def scalar():
    return make_scalar_decay(tau=0.01, a=-1.0)


@pytest.fixture
def motor():
    return make_dc_motor()


def linear_system(gain=0.5, input_gain=0.1, lo=-1.0, hi=1.0):
    return DiscreteSystem(Box([lo], [hi]), Box([lo], [hi]), lambda X, U: gain * X + input_gain * U, name="linear")


@pytest.fixture
def contraction():
    return linear_system()


def abs_gap_net(lipschitz_bound=2.5, lam=2.0):
    """ReLU net computing exactly |x - xhat| for scalar states."""
    return LyapunovNet([[[1.0, -1.0], [-1.0, 1.0]], [[1.0, 1.0]]], [[0.0, 0.0], [0.0]], [[lam, lam]],
                       lipschitz_bound, "relu")


def random_net(rng, n=1, hidden=(5,), LL=1.5, scale=1.0, activation="tanh"):
    widths = [2 * n, *hidden, 1]
    W = [rng.standard_normal((widths[i + 1], widths[i])) * scale for i in range(len(widths) - 1)]
    b = [rng.standard_normal(widths[i + 1]) * scale for i in range(len(widths) - 1)]
    lam = [np.exp(rng.standard_normal(h) * 0.3) for h in hidden]
    return LyapunovNet(W, b, lam, LL, activation)


@pytest.fixture
def scalar_templates():
    return (KTemplate(1e-5), KTemplate(1.0), KTemplate(1e-4), KTemplate(1e-4))
