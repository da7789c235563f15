import numpy as np
import pytest

from kbrann.config import ConfigError, PipelineConfig
from kbrann.tensor import Tensor
from kbrann.train import SGD, Adam, make_optimizer


def as4d(values):
    return np.array(values, dtype=float).reshape(1, -1, 1, 1)


def param(values, grad):
    t = Tensor(as4d(values), requires_grad=True)
    t.grad = as4d(grad)
    return t


def test_sgd_momentum_by_hand():
    p = param([1.0, -2.0], [0.5, 1.0])
    opt = SGD([p], lr=0.1, momentum=0.9, clip=None)
    opt.step()
    np.testing.assert_allclose(p.data.ravel(), [0.95, -2.1])
    opt.step()
    # velocity is now g + 0.9 g = 1.9 g
    np.testing.assert_allclose(p.data.ravel(), [0.95 - 0.095, -2.1 - 0.19])


def test_clipping_rescales_the_global_norm():
    a, b = param([0.0], [3.0]), param([0.0], [4.0])
    norm = SGD([a, b], lr=1.0, momentum=0.0, clip=1.0).step()
    assert norm == pytest.approx(5.0)
    np.testing.assert_allclose([a.data.item(), b.data.item()], [-0.6, -0.8])


def test_adam_first_step_moves_by_the_learning_rate():
    p = param([1.0, 1.0, 1.0], [1e-3, -2.0, 40.0])
    Adam([p], lr=0.01, clip=None).step()
    # bias-corrected moments make the first update lr * g / (|g| + eps)
    g = np.array([1e-3, -2.0, 40.0])
    np.testing.assert_allclose(p.data.ravel(), 1.0 - 0.01 * g / (np.abs(g) + 1e-8), rtol=1e-12)


def test_adam_matches_a_scalar_loop():
    rng = np.random.default_rng(0)
    grads = rng.normal(size=(5, 3))
    p = param(np.zeros(3), grads[0])
    opt = Adam([p], lr=0.05, beta1=0.8, beta2=0.99, clip=None)
    x, m, v = np.zeros(3), np.zeros(3), np.zeros(3)
    for t, g in enumerate(grads, start=1):
        p.grad = as4d(g)
        opt.step()
        m = 0.8 * m + 0.2 * g
        v = 0.99 * v + 0.01 * g * g
        x = x - 0.05 * (m / (1 - 0.8 ** t)) / (np.sqrt(v / (1 - 0.99 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data.ravel(), x, rtol=1e-12)


def test_parameters_without_grad_are_left_alone():
    p = Tensor(np.ones((1, 2, 1, 1)), requires_grad=True)
    for opt in (SGD([p], lr=1.0), Adam([p], lr=1.0)):
        opt.step()
    np.testing.assert_array_equal(p.data, 1.0)


def test_optimizer_selection():
    p = [param([0.0], [1.0])]
    assert isinstance(make_optimizer(p, PipelineConfig()), Adam)
    assert isinstance(make_optimizer(p, PipelineConfig(optimizer="sgd")), SGD)
    with pytest.raises(ConfigError):
        PipelineConfig(optimizer="rmsprop")
