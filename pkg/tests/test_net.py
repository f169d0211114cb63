import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from data import Dataset, gen_dataset
from net import (
    LossKind,
    NetworkConfig,
    NetworkParams,
    forward,
    forward_batch,
    grad_input,
    init_params,
    leaky_relu,
    leaky_relu_grad,
    loss,
    loss_and_grad,
    loss_value,
)
from utils import DimensionError


def test_config_validation():
    with pytest.raises(DimensionError):
        NetworkConfig(d=4, m=1)
    with pytest.raises(DimensionError):
        NetworkConfig(d=4, m=4, gamma=1.0)
    with pytest.raises(DimensionError):
        NetworkConfig(d=4, m=5)
    cfg = NetworkConfig(d=4, m=5, m_plus=2)
    assert (cfg.m_plus, cfg.m_minus, cfg.balanced) == (2, 3, False)


def test_output_weights_signs():
    a = NetworkConfig(d=3, m=6, m_plus=4).output_weights()
    np.testing.assert_allclose(a, np.array([1, 1, 1, 1, -1, -1]) / np.sqrt(6))


def test_leaky_relu_slope_at_zero_is_gamma():
    assert leaky_relu_grad(np.array([0.0]), 0.3)[0] == 0.3
    np.testing.assert_array_equal(leaky_relu(np.array([-2.0, 0.0, 2.0]), 0.5), [-1.0, 0.0, 2.0])


def test_init_params():
    cfg = NetworkConfig(d=100, m=8, init_scale=0.01)
    p = init_params(cfg, seed=0)
    assert p.W.shape == (8, 100)
    np.testing.assert_array_equal(p.W, init_params(cfg, seed=0).W)
    assert np.std(p.W) == pytest.approx(0.001, rel=0.2)
    zero = init_params(NetworkConfig(d=100, m=8, init_scale=0.0), seed=0)
    assert not zero.W.any()


def test_forward_matches_batch(uniform_ds):
    cfg = NetworkConfig(d=32, m=6)
    p = init_params(cfg, seed=1)
    batch = forward_batch(p, cfg, uniform_ds.X)
    single = [forward(p, cfg, x) for x in uniform_ds.X]
    np.testing.assert_allclose(batch, single, rtol=1e-13)
    with pytest.raises(DimensionError):
        forward(p, cfg, uniform_ds.X)
    with pytest.raises(DimensionError):
        forward_batch(p, cfg, np.ones((2, 31)))


def test_logistic_loss_is_stable_for_large_negative_margins():
    assert loss_value(np.array([-1000.0]), LossKind.LOGISTIC)[0] == pytest.approx(1000.0)
    assert loss_value(np.array([1000.0]), LossKind.LOGISTIC)[0] == pytest.approx(0.0, abs=1e-300)


def _kink_free_instance(seed, d=5, m=4, n=3):
    rng = np.random.default_rng(seed)
    cfg = NetworkConfig(d=d, m=m, gamma=0.4)
    W = rng.standard_normal((m, d))
    X = rng.standard_normal((n, d))
    y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
    return cfg, NetworkParams(W), Dataset(X, y)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000), st.sampled_from(list(LossKind)))
def test_weight_gradient_matches_finite_differences(seed, kind):
    cfg, params, ds = _kink_free_instance(seed)
    assume(np.abs(ds.X @ params.W.T).min() > 1e-3)
    _, grad = loss_and_grad(params, cfg, ds, kind)
    h = 1e-6
    numeric = np.zeros_like(params.W)
    for idx in np.ndindex(params.W.shape):
        Wp = params.W.copy()
        Wm = params.W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        numeric[idx] = (loss(NetworkParams(Wp), cfg, ds, kind) - loss(NetworkParams(Wm), cfg, ds, kind)) / (2 * h)
    np.testing.assert_allclose(grad, numeric, rtol=1e-5, atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_input_gradient_matches_finite_differences(seed):
    cfg, params, ds = _kink_free_instance(seed)
    x = ds.X[0]
    assume(np.abs(params.W @ x).min() > 1e-3)
    h = 1e-6
    numeric = np.array([
        (forward(params, cfg, x + h * e) - forward(params, cfg, x - h * e)) / (2 * h) for e in np.eye(cfg.d)
    ])
    np.testing.assert_allclose(grad_input(params, cfg, x), numeric, rtol=1e-5, atol=1e-8)


def test_loss_and_grad_is_thread_invariant():
    ds = gen_dataset("gaussian", 16, 700, seed=4)
    cfg = NetworkConfig(d=16, m=4)
    p = init_params(cfg, seed=2)
    value_1, grad_1 = loss_and_grad(p, cfg, ds, LossKind.EXPONENTIAL, threads=1)
    value_4, grad_4 = loss_and_grad(p, cfg, ds, LossKind.EXPONENTIAL, threads=4)
    assert value_1 == value_4
    assert grad_1.tobytes() == grad_4.tobytes()


def test_params_shape_check(small_cfg):
    with pytest.raises(DimensionError):
        NetworkParams(np.ones((3, 3))).check(small_cfg)
    with pytest.raises(DimensionError):
        NetworkParams(np.ones(3))
