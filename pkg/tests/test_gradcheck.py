"""
Tests for the finite-difference checker and the layer check suite.
"""
import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(__file__), '..', 'src'))

from errors import NumericError, StateError
from numerics.gradcheck import GradCheckResult, finite_difference_check, run_gradcheck_suite
from numerics.tensor import counter_rng, wide_precision


def test_linear_function_is_exact():
    a = 0.5 + np.abs(counter_rng(11).standard_normal(6))
    point = counter_rng(12).standard_normal(6)
    with wide_precision():
        error = finite_difference_check(lambda x: (float(a @ x), a.copy()), point, h=1e-3)
    assert error < 1e-10


def test_quadratic_function():
    point = 0.5 + np.abs(counter_rng(13).standard_normal(8))
    with wide_precision():
        error = finite_difference_check(lambda x: (float(np.sum(x * x)), 2 * x), point, h=1e-5)
    assert error < 1e-8


def test_wrong_gradient_is_detected():
    point = np.array([1.0, 2.0])
    with wide_precision():
        error = finite_difference_check(lambda x: (float(np.sum(x * x)), x), point)
    assert error > 0.1


def test_requires_wide_precision():
    with pytest.raises(StateError):
        finite_difference_check(lambda x: (0.0, np.zeros_like(x)), np.zeros(2))


def test_non_finite_evaluation_raises():
    def blows_up(x):
        return float(np.log(x[0])), np.array([1.0 / x[0]])

    with wide_precision():
        with pytest.raises(NumericError):
            finite_difference_check(blows_up, np.array([1e-6]), h=1e-5)


def test_result_passed_uses_strict_tolerance():
    assert GradCheckResult('dense', 'input', 1e-7, 1e-6).passed
    assert not GradCheckResult('dense', 'input', 1e-6, 1e-6).passed


def test_suite_covers_every_layer_and_passes():
    results = run_gradcheck_suite(points=2, seed=0)
    layers = {r.layer for r in results}
    assert layers == {
        'conv2d', 'maxpool2d', 'dense', 'relu', 'softmax_cross_entropy', 'batchnorm_train', 'conv_relu_dense_loss',
    }
    assert {r.quantity for r in results if r.layer == 'batchnorm_train'} == {'input', 'gamma', 'beta'}
    failed = [r for r in results if not r.passed]
    assert not failed, failed
