"""
Tests for the batch-normalization layer.
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from batchnorm.batchnorm_layer import BatchNormParams, bn_backward, bn_forward_eval, bn_forward_train
from errors import DataError, ParameterError, ShapeError, StateError
from numerics.gradcheck import finite_difference_check
from numerics.tensor import counter_rng, wide_precision


def wide_params(channels, **kwargs):
    return BatchNormParams.initialize(channels, dtype=np.float64, **kwargs)


def test_constant_batch_outputs_beta():
    params = wide_params(2)
    params.gamma = np.array([3.0, -2.0])
    params.beta = np.array([0.5, 1.5])
    out, cache = bn_forward_train(np.full((4, 2, 3, 3), 0.5), params)
    assert np.allclose(cache.x_hat, 0.0)
    assert np.allclose(out[:, 0], 0.5) and np.allclose(out[:, 1], 1.5)

    _, grad_gamma, _ = bn_backward(cache, counter_rng(1).standard_normal(out.shape), params)
    np.testing.assert_allclose(grad_gamma, 0.0, atol=1e-12)


def test_hand_evaluated_three_values():
    out, _ = bn_forward_train(np.array([1.0, 2.0, 3.0]).reshape(3, 1, 1, 1), wide_params(1))
    np.testing.assert_allclose(out.reshape(-1), [-1.22474, 0.0, 1.22474], atol=1e-4)


def test_normalized_output_statistics_over_random_batches():
    for index in range(100):
        rng = counter_rng(2, index)
        x = rng.standard_normal((32, 3, 4, 4)) * rng.uniform(0.5, 3.0, size=(1, 3, 1, 1)) + rng.uniform(-2, 2)
        params = wide_params(3)
        out, cache = bn_forward_train(x, params)
        sigma2 = x.var(axis=(0, 2, 3))
        assert np.all(np.abs(out.mean(axis=(0, 2, 3))) < 1e-10)
        np.testing.assert_allclose(out.var(axis=(0, 2, 3)), sigma2 / (sigma2 + params.eps), rtol=0, atol=1e-9)


def test_affine_shift_invariance():
    rng = counter_rng(3)
    x = rng.standard_normal((8, 2, 3, 3))
    _, base = bn_forward_train(x, wide_params(2))
    _, shifted = bn_forward_train(2.5 * x + 4.0, wide_params(2))
    np.testing.assert_allclose(shifted.x_hat, base.x_hat, atol=1e-4)


def test_zero_gradient_gives_zero_gradients():
    params = wide_params(2)
    out, cache = bn_forward_train(counter_rng(4).standard_normal((4, 2, 2, 2)), params)
    grads = bn_backward(cache, np.zeros_like(out), params)
    assert all(not g.any() for g in grads)


def test_backward_matches_finite_differences():
    rng = counter_rng(5)
    x = rng.standard_normal((4, 2, 3, 3))
    projection = rng.standard_normal(x.shape)

    def loss(point):
        params = wide_params(2)
        out, cache = bn_forward_train(point, params)
        return float(np.sum(out * projection)), bn_backward(cache, projection, params)[0]

    with wide_precision():
        assert finite_difference_check(loss, x) < 1e-4


def test_running_statistics_update_and_momentum_one():
    params = wide_params(1, momentum=1.0)
    x = counter_rng(6).standard_normal((8, 1, 2, 2)) + 3.0
    bn_forward_train(x, params)
    assert params.batches_seen == 1
    np.testing.assert_allclose(params.running_mean, [x.mean()])
    np.testing.assert_allclose(params.running_var, [x.var()])

    expected = (x - x.mean()) / np.sqrt(x.var() + params.eps)
    np.testing.assert_allclose(bn_forward_eval(x, params), expected)


def test_running_statistics_converge():
    params = wide_params(2)
    for step in range(500):
        x = counter_rng(7, step).normal(loc=[[[[1.5]], [[-0.5]]]], scale=[[[[2.0]], [[0.5]]]], size=(256, 2, 4, 4))
        bn_forward_train(x, params)
    np.testing.assert_allclose(params.running_mean, [1.5, -0.5], atol=0.04)
    np.testing.assert_allclose(params.running_var, [4.0, 0.25], rtol=0.02)


def test_eval_with_identity_statistics_is_near_identity():
    params = wide_params(1)
    params.batches_seen = 1
    x = counter_rng(8).standard_normal((2, 1, 3, 3))
    out = bn_forward_eval(x, params)
    assert np.all(np.abs(out - x) < params.eps / 2 * np.abs(x) + 1e-12)
    assert params.running_mean[0] == 0.0 and params.running_var[0] == 1.0


def test_eval_before_training_raises():
    with pytest.raises(StateError, match="before any training batch"):
        bn_forward_eval(np.zeros((1, 1, 2, 2)), wide_params(1))


def test_invalid_parameters_and_shapes():
    with pytest.raises(ParameterError):
        wide_params(1, eps=0.0)
    with pytest.raises(ShapeError):
        bn_forward_train(np.zeros((2, 3, 2, 2)), wide_params(2))
    with pytest.raises(DataError):
        bn_forward_train(np.zeros((0, 1, 2, 2)), wide_params(1))
