"""
Spatial batch normalization.

Statistics are per channel over the N, H and W axes, with the biased
(divide-by-m) variance in training and in the running estimate alike.
"""
from dataclasses import dataclass
from typing import Tuple

import numpy as np

from errors import DataError, ParameterError, ShapeError, StateError

DEFAULT_EPS = 1e-5
DEFAULT_MOMENTUM = 0.1

_REDUCE_AXES = (0, 2, 3)


@dataclass
class BatchNormParams:
    """Learnable affine (gamma, beta) plus running statistics for evaluation."""
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = DEFAULT_EPS
    momentum: float = DEFAULT_MOMENTUM
    batches_seen: int = 0

    def __post_init__(self) -> None:
        channels = self.gamma.shape
        for name in ('beta', 'running_mean', 'running_var'):
            if getattr(self, name).shape != channels:
                raise ShapeError(f"BatchNorm {name} shape {getattr(self, name).shape} != gamma shape {channels}")
        if self.eps <= 0:
            raise ParameterError(f"BatchNorm eps must be positive, got {self.eps}")
        if not 0.0 <= self.momentum <= 1.0:
            raise ParameterError(f"BatchNorm momentum must lie in [0, 1], got {self.momentum}")

    @classmethod
    def initialize(
        cls, channels: int, eps: float = DEFAULT_EPS, momentum: float = DEFAULT_MOMENTUM,
        dtype: type = np.float32
    ) -> 'BatchNormParams':
        """Fresh parameters: gamma=1, beta=0, running mean 0 and variance 1."""
        return cls(
            gamma=np.ones(channels, dtype=dtype),
            beta=np.zeros(channels, dtype=dtype),
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps,
            momentum=momentum,
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


@dataclass
class BNCache:
    """Training-mode intermediates needed by bn_backward."""
    x_hat: np.ndarray
    mu: np.ndarray
    var: np.ndarray
    inv_std: np.ndarray
    reduce_count: int


def _channel_view(vector: np.ndarray) -> np.ndarray:
    return vector.reshape(1, -1, 1, 1)


def _check_input(x: np.ndarray, params: BatchNormParams) -> None:
    if x.ndim != 4:
        raise ShapeError(f"BatchNorm expects a 4-D input, got shape {x.shape}")
    if x.shape[1] != params.channels:
        raise ShapeError(f"Input has {x.shape[1]} channels but BatchNorm holds {params.channels}")


def bn_forward_train(x: np.ndarray, params: BatchNormParams) -> Tuple[np.ndarray, BNCache]:
    """
    Normalize with the batch statistics, apply gamma/beta and update the
    running statistics as r <- (1 - momentum) * r + momentum * batch_stat.

    Args:
        x: Input [N x C x H x W]
        params: Parameters; running statistics are updated in place

    Returns:
        Tuple of (output, cache)

    Raises:
        DataError: If the batch holds no values per channel
    """
    _check_input(x, params)
    reduce_count = x.shape[0] * x.shape[2] * x.shape[3]
    if reduce_count == 0:
        raise DataError("Cannot normalize an empty batch")

    mu = x.mean(axis=_REDUCE_AXES)
    centered = x - _channel_view(mu)
    var = (centered * centered).mean(axis=_REDUCE_AXES)
    inv_std = 1.0 / np.sqrt(var + params.eps)
    x_hat = centered * _channel_view(inv_std)
    out = _channel_view(params.gamma) * x_hat + _channel_view(params.beta)

    momentum = params.momentum
    params.running_mean = ((1.0 - momentum) * params.running_mean + momentum * mu).astype(params.running_mean.dtype)
    params.running_var = ((1.0 - momentum) * params.running_var + momentum * var).astype(params.running_var.dtype)
    params.batches_seen += 1

    cache = BNCache(x_hat=x_hat, mu=mu, var=var, inv_std=inv_std, reduce_count=reduce_count)
    return out, cache


def bn_backward(
    cache: BNCache, grad_out: np.ndarray, params: BatchNormParams
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Exact gradients of the training-mode forward map, including the
    dependence of the batch mean and variance on the input.

    Returns:
        Tuple of (grad_in, grad_gamma, grad_beta)
    """
    if grad_out.shape != cache.x_hat.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match BatchNorm input {cache.x_hat.shape}")

    grad_beta = grad_out.sum(axis=_REDUCE_AXES)
    grad_gamma = (grad_out * cache.x_hat).sum(axis=_REDUCE_AXES)

    m = cache.reduce_count
    grad_x_hat = grad_out * _channel_view(params.gamma)
    sum_grad = grad_x_hat.sum(axis=_REDUCE_AXES)
    sum_grad_x_hat = (grad_x_hat * cache.x_hat).sum(axis=_REDUCE_AXES)
    grad_in = _channel_view(cache.inv_std / m) * (
        m * grad_x_hat - _channel_view(sum_grad) - cache.x_hat * _channel_view(sum_grad_x_hat)
    )
    return grad_in, grad_gamma, grad_beta


def bn_forward_eval(x: np.ndarray, params: BatchNormParams) -> np.ndarray:
    """
    Normalize with the running statistics; params are left untouched.

    Raises:
        StateError: If no training batch has updated the running statistics
    """
    if params.batches_seen == 0:
        raise StateError("BatchNorm evaluation before any training batch")
    _check_input(x, params)
    inv_std = 1.0 / np.sqrt(params.running_var + params.eps)
    x_hat = (x - _channel_view(params.running_mean)) * _channel_view(inv_std)
    return (_channel_view(params.gamma) * x_hat + _channel_view(params.beta)).astype(x.dtype)
