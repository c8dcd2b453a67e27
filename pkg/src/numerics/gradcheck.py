"""
Central finite-difference gradient checks for every layer.
"""
import logging
from dataclasses import dataclass
from typing import Callable, List, Tuple

import numpy as np

from batchnorm.batchnorm_layer import BatchNormParams, bn_backward, bn_forward_train
from errors import NumericError, StateError
from numerics.layers import (
    ConvParams,
    DenseParams,
    conv2d,
    conv2d_grad,
    dense_affine,
    dense_affine_grad,
    maxpool2d,
    maxpool2d_grad,
    relu,
    relu_grad,
    softmax_cross_entropy,
)
from numerics.tensor import STREAM_CHECKS, WIDE_DTYPE, as_tensor, counter_rng, ensure_finite, is_wide, wide_precision

logger = logging.getLogger(__name__)

DEFAULT_STEP = 1e-5
SMOOTH_TOLERANCE = 1e-6
KINK_TOLERANCE = 1e-4

# f(point) -> (value, analytic gradient at point)
ScalarFunction = Callable[[np.ndarray], Tuple[float, np.ndarray]]


@dataclass(frozen=True)
class GradCheckResult:
    """Outcome of one finite-difference comparison."""
    layer: str
    quantity: str
    max_relative_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_relative_error < self.tolerance


def finite_difference_check(f: ScalarFunction, point: np.ndarray, h: float = DEFAULT_STEP) -> float:
    """
    Compare the analytic gradient of f with central differences.

    Args:
        f: Scalar map returning (value, analytic gradient)
        point: Where to evaluate; copied to float64
        h: Central difference step

    Returns:
        float: max over coordinates of |analytic - numeric| / max(1e-8, |analytic| + |numeric|)

    Raises:
        StateError: If wide precision is not active
        NumericError: If any evaluation is non-finite
    """
    if not is_wide():
        raise StateError("Finite-difference checks require wide precision")

    point = np.array(point, dtype=WIDE_DTYPE)
    value, analytic = f(point.copy())
    if not np.isfinite(value):
        raise NumericError(f"Function value at the check point is {value}")
    analytic = as_tensor(analytic)
    ensure_finite(analytic, "Analytic gradient")
    if analytic.shape != point.shape:
        raise NumericError(f"Analytic gradient shape {analytic.shape} != point shape {point.shape}")

    numeric = np.zeros_like(point)
    flat_point = point.reshape(-1)
    flat_numeric = numeric.reshape(-1)
    for i in range(flat_point.size):
        original = flat_point[i]
        flat_point[i] = original + h
        plus, _ = f(point.copy())
        flat_point[i] = original - h
        minus, _ = f(point.copy())
        flat_point[i] = original
        if not (np.isfinite(plus) and np.isfinite(minus)):
            raise NumericError(f"Non-finite evaluation at coordinate {i}")
        flat_numeric[i] = (plus - minus) / (2.0 * h)

    denominator = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denominator))


def _projected(out: np.ndarray, projection: np.ndarray) -> float:
    return float(np.sum(out * projection))


def _conv_checks(rng: np.random.Generator) -> List[Tuple[str, str, ScalarFunction, np.ndarray, float]]:
    x = rng.standard_normal((2, 2, 5, 5))
    kernels = rng.standard_normal((3, 2, 3, 3))
    bias = rng.standard_normal(3)
    projection = rng.standard_normal((2, 3, 5, 5))
    stride, padding = 1, 1

    def wrt_input(point):
        out, cache = conv2d(point, ConvParams(kernels, bias, stride, padding))
        return _projected(out, projection), conv2d_grad(cache, projection)[0]

    def wrt_kernels(point):
        out, cache = conv2d(x, ConvParams(point, bias, stride, padding))
        return _projected(out, projection), conv2d_grad(cache, projection)[1]

    def wrt_bias(point):
        out, cache = conv2d(x, ConvParams(kernels, point, stride, padding))
        return _projected(out, projection), conv2d_grad(cache, projection)[2]

    return [
        ('conv2d', 'input', wrt_input, x, SMOOTH_TOLERANCE),
        ('conv2d', 'kernels', wrt_kernels, kernels, SMOOTH_TOLERANCE),
        ('conv2d', 'bias', wrt_bias, bias, SMOOTH_TOLERANCE),
    ]


def _pool_checks(rng: np.random.Generator) -> List[Tuple[str, str, ScalarFunction, np.ndarray, float]]:
    # Distinct values spaced far beyond 2h keep every window maximum strict.
    shape = (2, 2, 5, 5)
    x = (rng.permutation(int(np.prod(shape))) * 0.1).reshape(shape).astype(WIDE_DTYPE)
    projection = rng.standard_normal((2, 2, 2, 2))

    def wrt_input(point):
        out, cache = maxpool2d(point, 2)
        return _projected(out, projection), maxpool2d_grad(cache, projection)

    return [('maxpool2d', 'input', wrt_input, x, KINK_TOLERANCE)]


def _dense_checks(rng: np.random.Generator) -> List[Tuple[str, str, ScalarFunction, np.ndarray, float]]:
    x = rng.standard_normal((4, 6))
    weights = rng.standard_normal((6, 3))
    bias = rng.standard_normal(3)
    projection = rng.standard_normal((4, 3))

    def wrt_input(point):
        out, cache = dense_affine(point, DenseParams(weights, bias))
        return _projected(out, projection), dense_affine_grad(cache, projection)[0]

    def wrt_weights(point):
        out, cache = dense_affine(x, DenseParams(point, bias))
        return _projected(out, projection), dense_affine_grad(cache, projection)[1]

    def wrt_bias(point):
        out, cache = dense_affine(x, DenseParams(weights, point))
        return _projected(out, projection), dense_affine_grad(cache, projection)[2]

    return [
        ('dense', 'input', wrt_input, x, SMOOTH_TOLERANCE),
        ('dense', 'weights', wrt_weights, weights, SMOOTH_TOLERANCE),
        ('dense', 'bias', wrt_bias, bias, SMOOTH_TOLERANCE),
    ]


def _relu_checks(rng: np.random.Generator) -> List[Tuple[str, str, ScalarFunction, np.ndarray, float]]:
    signs = np.where(rng.random((3, 7)) < 0.5, -1.0, 1.0)
    x = signs * (0.1 + rng.random((3, 7)))
    projection = rng.standard_normal((3, 7))

    def wrt_input(point):
        out, cache = relu(point)
        return _projected(out, projection), relu_grad(cache, projection)

    return [('relu', 'input', wrt_input, x, SMOOTH_TOLERANCE)]


def _softmax_checks(rng: np.random.Generator) -> List[Tuple[str, str, ScalarFunction, np.ndarray, float]]:
    logits = rng.standard_normal((4, 5))
    labels = rng.integers(0, 5, size=4)

    def wrt_logits(point):
        loss, _, grad = softmax_cross_entropy(point, labels)
        return loss, grad

    return [('softmax_cross_entropy', 'logits', wrt_logits, logits, SMOOTH_TOLERANCE)]


def _batchnorm_checks(rng: np.random.Generator) -> List[Tuple[str, str, ScalarFunction, np.ndarray, float]]:
    x = rng.standard_normal((4, 2, 3, 3)) * 2.0 + 0.5
    gamma = 1.0 + 0.5 * rng.standard_normal(2)
    beta = rng.standard_normal(2)
    projection = rng.standard_normal((4, 2, 3, 3))

    def params_for(g, b):
        params = BatchNormParams.initialize(2, dtype=WIDE_DTYPE)
        params.gamma, params.beta = g, b
        return params

    def wrt_input(point):
        params = params_for(gamma, beta)
        out, cache = bn_forward_train(point, params)
        return _projected(out, projection), bn_backward(cache, projection, params)[0]

    def wrt_gamma(point):
        params = params_for(point, beta)
        out, cache = bn_forward_train(x, params)
        return _projected(out, projection), bn_backward(cache, projection, params)[1]

    def wrt_beta(point):
        params = params_for(gamma, point)
        out, cache = bn_forward_train(x, params)
        return _projected(out, projection), bn_backward(cache, projection, params)[2]

    return [
        ('batchnorm_train', 'input', wrt_input, x, SMOOTH_TOLERANCE),
        ('batchnorm_train', 'gamma', wrt_gamma, gamma, SMOOTH_TOLERANCE),
        ('batchnorm_train', 'beta', wrt_beta, beta, SMOOTH_TOLERANCE),
    ]


def _composed_checks(rng: np.random.Generator) -> List[Tuple[str, str, ScalarFunction, np.ndarray, float]]:
    x = rng.standard_normal((3, 1, 6, 6))
    conv = ConvParams(rng.standard_normal((2, 1, 3, 3)), rng.standard_normal(2) * 0.1, 1, 0)
    dense_weights = rng.standard_normal((2 * 4 * 4, 4)) * 0.3
    dense_bias = rng.standard_normal(4) * 0.1
    labels = rng.integers(0, 4, size=3)

    def wrt_input(point):
        conv_out, conv_cache = conv2d(point, conv)
        act, relu_cache = relu(conv_out)
        flat = act.reshape(act.shape[0], -1)
        logits, dense_cache = dense_affine(flat, DenseParams(dense_weights, dense_bias))
        loss, _, grad_logits = softmax_cross_entropy(logits, labels)
        grad_flat = dense_affine_grad(dense_cache, grad_logits)[0]
        grad_act = relu_grad(relu_cache, grad_flat.reshape(act.shape))
        return loss, conv2d_grad(conv_cache, grad_act)[0]

    return [('conv_relu_dense_loss', 'input', wrt_input, x, KINK_TOLERANCE)]


CHECK_BUILDERS = (
    _conv_checks,
    _pool_checks,
    _dense_checks,
    _relu_checks,
    _softmax_checks,
    _batchnorm_checks,
    _composed_checks,
)


def run_gradcheck_suite(points: int = 10, seed: int = 0, h: float = DEFAULT_STEP) -> List[GradCheckResult]:
    """
    Check every layer at `points` random points and keep the worst error per
    (layer, quantity).

    Args:
        points: Random points per check
        seed: Seed for the check stream
        h: Central difference step

    Returns:
        List of GradCheckResult, one per (layer, quantity)
    """
    worst = {}
    with wide_precision():
        for point_index in range(points):
            rng = counter_rng(seed, STREAM_CHECKS, point_index)
            for builder in CHECK_BUILDERS:
                for layer, quantity, f, point, tolerance in builder(rng):
                    error = finite_difference_check(f, point, h)
                    key = (layer, quantity)
                    if key not in worst or error > worst[key].max_relative_error:
                        worst[key] = GradCheckResult(layer, quantity, error, tolerance)

    results = list(worst.values())
    failed = [r for r in results if not r.passed]
    if failed:
        logger.warning(f"{len(failed)} gradient check(s) above tolerance")
    else:
        logger.info(f"All {len(results)} gradient checks passed at {points} point(s) each")
    return results
