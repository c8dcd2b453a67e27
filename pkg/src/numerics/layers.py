"""
Network layers with explicit forward/backward contracts.

Every forward function returns its output and a LayerCache; the matching
backward function consumes that cache exactly once. Convolution is computed
through im2col, so the matrix product fixes its summation order: channel,
then kernel row, then kernel column, with the bias added last.
"""
from dataclasses import dataclass, field
from typing import Any, Dict, Sequence, Tuple

import numpy as np

from errors import DataError, ParameterError, ShapeError, StateError
from numerics.tensor import STREAM_DROPOUT, counter_rng

TRAIN_MODE = 'train'
EVAL_MODE = 'eval'


@dataclass
class ConvParams:
    """Kernels [filters x in_channels x kh x kw], bias [filters], stride and padding."""
    kernels: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.kernels.ndim != 4:
            raise ShapeError(f"Conv kernels must be 4-D, got shape {self.kernels.shape}")
        filters, _, kh, kw = self.kernels.shape
        if filters < 1 or kh < 1 or kw < 1:
            raise ShapeError(f"Conv kernels need positive extents, got shape {self.kernels.shape}")
        if self.bias.shape != (filters,):
            raise ShapeError(f"Conv bias shape {self.bias.shape} does not match {filters} filters")
        if self.stride < 1:
            raise ParameterError(f"Conv stride must be positive, got {self.stride}")
        if self.padding < 0:
            raise ParameterError(f"Conv padding must be non-negative, got {self.padding}")


@dataclass
class DenseParams:
    """Weights [in_dim x out_dim] and bias [out_dim]."""
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self) -> None:
        if self.weights.ndim != 2 or min(self.weights.shape) < 1:
            raise ShapeError(f"Dense weights must be a non-empty matrix, got shape {self.weights.shape}")
        if self.bias.shape != (self.weights.shape[1],):
            raise ShapeError(
                f"Dense bias shape {self.bias.shape} does not match weights {self.weights.shape}"
            )


@dataclass
class LayerCache:
    """Forward-pass intermediates for one layer call; consumed by one backward call."""
    kind: str
    values: Dict[str, Any] = field(default_factory=dict)
    consumed: bool = False

    def consume(self, kind: str) -> Dict[str, Any]:
        """Hand the stored values to a backward call of the matching kind."""
        if self.kind != kind:
            raise StateError(f"A {self.kind} cache cannot feed a {kind} backward pass")
        if self.consumed:
            raise StateError(f"The {kind} cache was already consumed by a backward pass")
        self.consumed = True
        return self.values


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """
    Matrix product with shape checking and a fixed summation order: every
    output element accumulates a[i, 0] * b[0, j] + a[i, 1] * b[1, j] + ...
    strictly left to right.

    Args:
        a: Matrix [m x k]
        b: Matrix [k x n]

    Returns:
        np.ndarray: Product [m x n]

    Raises:
        ShapeError: If either operand is not 2-D or inner dimensions differ
    """
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"Cannot multiply shapes {a.shape} and {b.shape}")
    dtype = np.result_type(a.dtype, b.dtype)
    inner = a.shape[1]
    if inner == 0:
        return np.zeros((a.shape[0], b.shape[1]), dtype=dtype)
    a = a.astype(dtype, copy=False)
    b = b.astype(dtype, copy=False)
    out = a[:, 0:1] * b[0:1, :]
    term = np.empty_like(out)
    for k in range(1, inner):
        np.multiply(a[:, k:k + 1], b[k:k + 1, :], out=term)
        out += term
    return out


def conv_output_extent(extent: int, kernel: int, padding: int, stride: int, axis: str) -> int:
    span = extent + 2 * padding - kernel
    if span < 0:
        raise ShapeError(f"Input {axis} {extent} (padding {padding}) is smaller than kernel {kernel}")
    if span % stride:
        raise ShapeError(
            f"Input {axis} {extent} with kernel {kernel}, padding {padding}, stride {stride} "
            f"gives a non-integral output extent"
        )
    return span // stride + 1


def _im2col_indices(
    x_shape: Sequence[int], kh: int, kw: int, padding: int, stride: int
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, int, int]:
    _, channels, height, width = x_shape
    out_h = conv_output_extent(height, kh, padding, stride, 'height')
    out_w = conv_output_extent(width, kw, padding, stride, 'width')

    i0 = np.tile(np.repeat(np.arange(kh), kw), channels)
    i1 = stride * np.repeat(np.arange(out_h), out_w)
    j0 = np.tile(np.arange(kw), kh * channels)
    j1 = stride * np.tile(np.arange(out_w), out_h)
    rows = i0.reshape(-1, 1) + i1.reshape(1, -1)
    cols = j0.reshape(-1, 1) + j1.reshape(1, -1)
    chans = np.repeat(np.arange(channels), kh * kw).reshape(-1, 1)
    return chans, rows, cols, out_h, out_w


def im2col(x: np.ndarray, kh: int, kw: int, padding: int, stride: int) -> Tuple[np.ndarray, int, int]:
    """
    Unfold sliding windows into columns.

    Returns:
        Tuple of (columns [C*kh*kw x out_h*out_w*N], out_h, out_w)
    """
    chans, rows, cols, out_h, out_w = _im2col_indices(x.shape, kh, kw, padding, stride)
    padded = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), mode='constant')
    windows = padded[:, chans, rows, cols]
    columns = windows.transpose(1, 2, 0).reshape(chans.shape[0], -1)
    return columns, out_h, out_w


def col2im(
    columns: np.ndarray, x_shape: Sequence[int], kh: int, kw: int, padding: int, stride: int
) -> np.ndarray:
    """Fold columns back into an image tensor, summing overlapping windows."""
    batch, channels, height, width = x_shape
    out_h = conv_output_extent(height, kh, padding, stride, 'height')
    out_w = conv_output_extent(width, kw, padding, stride, 'width')
    padded = np.zeros((batch, channels, height + 2 * padding, width + 2 * padding), dtype=columns.dtype)
    # Rows are ordered (channel, di, dj); columns (out_row, out_col, instance).
    parts = columns.reshape(channels, kh, kw, out_h, out_w, batch)
    for di in range(kh):
        for dj in range(kw):
            padded[:, :, di:di + stride * out_h:stride, dj:dj + stride * out_w:stride] += (
                parts[:, di, dj].transpose(3, 0, 1, 2)
            )
    if padding == 0:
        return padded
    return padded[:, :, padding:-padding, padding:-padding]


def conv2d(x: np.ndarray, params: ConvParams) -> Tuple[np.ndarray, LayerCache]:
    """
    Valid cross-correlation with stride and zero padding.

    Args:
        x: Input [N x C x H x W]
        params: Convolution parameters

    Returns:
        Tuple of (output [N x F x H' x W'], cache)

    Raises:
        ShapeError: On channel mismatch or a non-integral output extent
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got shape {x.shape}")
    filters, in_channels, kh, kw = params.kernels.shape
    if x.shape[1] != in_channels:
        raise ShapeError(f"Input has {x.shape[1]} channels but kernels expect {in_channels}")

    columns, out_h, out_w = im2col(x, kh, kw, params.padding, params.stride)
    flat_kernels = params.kernels.reshape(filters, -1)
    out = matmul(flat_kernels, columns) + params.bias.reshape(-1, 1)
    out = out.reshape(filters, out_h, out_w, x.shape[0]).transpose(3, 0, 1, 2)

    cache = LayerCache('conv2d', {'x_shape': x.shape, 'columns': columns, 'params': params,
                                  'out_shape': out.shape})
    return np.ascontiguousarray(out), cache


def conv2d_grad(cache: LayerCache, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Backward pass of conv2d.

    Returns:
        Tuple of (grad_in, grad_kernels, grad_bias)
    """
    values = cache.consume('conv2d')
    if grad_out.shape != values['out_shape']:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {values['out_shape']}")
    params: ConvParams = values['params']
    filters, _, kh, kw = params.kernels.shape

    flat_grad = grad_out.transpose(1, 2, 3, 0).reshape(filters, -1)
    grad_bias = grad_out.sum(axis=(0, 2, 3))
    grad_kernels = matmul(flat_grad, values['columns'].T).reshape(params.kernels.shape)
    grad_columns = matmul(params.kernels.reshape(filters, -1).T, flat_grad)
    grad_in = col2im(grad_columns, values['x_shape'], kh, kw, params.padding, params.stride)
    return grad_in, grad_kernels, grad_bias


def maxpool2d(x: np.ndarray, k: int) -> Tuple[np.ndarray, LayerCache]:
    """
    Non-overlapping k x k max pooling; trailing rows/columns that do not fill
    a window are dropped. Ties resolve to the lowest flat index in the window.
    """
    if k <= 0:
        raise ParameterError(f"Pool window must be positive, got {k}")
    if x.ndim != 4:
        raise ShapeError(f"maxpool2d expects a 4-D input, got shape {x.shape}")
    batch, channels, height, width = x.shape
    if height < k or width < k:
        raise ShapeError(f"Input extent {height}x{width} is smaller than pool window {k}")

    out_h, out_w = height // k, width // k
    cropped = x[:, :, :out_h * k, :out_w * k]
    windows = cropped.reshape(batch, channels, out_h, k, out_w, k).transpose(0, 1, 2, 4, 3, 5)
    windows = windows.reshape(batch, channels, out_h, out_w, k * k)
    # np.argmax returns the first occurrence.
    argmax = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]

    cache = LayerCache('maxpool2d', {'x_shape': x.shape, 'argmax': argmax, 'k': k})
    return np.ascontiguousarray(out), cache


def maxpool2d_grad(cache: LayerCache, grad_out: np.ndarray) -> np.ndarray:
    """Route each window's gradient to its argmax position."""
    values = cache.consume('maxpool2d')
    argmax, k = values['argmax'], values['k']
    if grad_out.shape != argmax.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match pooled shape {argmax.shape}")
    batch, channels, height, width = values['x_shape']
    out_h, out_w = argmax.shape[2], argmax.shape[3]

    windows = np.zeros((batch, channels, out_h, out_w, k * k), dtype=grad_out.dtype)
    np.put_along_axis(windows, argmax[..., None], grad_out[..., None], axis=-1)
    windows = windows.reshape(batch, channels, out_h, out_w, k, k).transpose(0, 1, 2, 4, 3, 5)

    grad_in = np.zeros((batch, channels, height, width), dtype=grad_out.dtype)
    grad_in[:, :, :out_h * k, :out_w * k] = windows.reshape(batch, channels, out_h * k, out_w * k)
    return grad_in


def dense_affine(x: np.ndarray, params: DenseParams) -> Tuple[np.ndarray, LayerCache]:
    """Affine map x @ W + b over the rows of x."""
    if x.ndim != 2 or x.shape[1] != params.weights.shape[0]:
        raise ShapeError(f"Dense input shape {x.shape} does not match weights {params.weights.shape}")
    out = matmul(x, params.weights) + params.bias
    return out, LayerCache('dense', {'x': x, 'params': params, 'out_shape': out.shape})


def dense_affine_grad(cache: LayerCache, grad_out: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Backward pass of dense_affine.

    Returns:
        Tuple of (grad_in, grad_weights, grad_bias)
    """
    values = cache.consume('dense')
    if grad_out.shape != values['out_shape']:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match forward output {values['out_shape']}")
    params: DenseParams = values['params']
    grad_in = matmul(grad_out, params.weights.T)
    grad_weights = matmul(values['x'].T, grad_out)
    grad_bias = grad_out.sum(axis=0)
    return grad_in, grad_weights, grad_bias


def relu(x: np.ndarray) -> Tuple[np.ndarray, LayerCache]:
    """Elementwise max(0, x)."""
    mask = x > 0
    return np.where(mask, x, x.dtype.type(0)), LayerCache('relu', {'mask': mask})


def relu_grad(cache: LayerCache, grad_out: np.ndarray) -> np.ndarray:
    """Pass gradient where the input was strictly positive; the kink counts as 0."""
    mask = cache.consume('relu')['mask']
    if grad_out.shape != mask.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match relu input {mask.shape}")
    return np.where(mask, grad_out, grad_out.dtype.type(0))


def dropout(
    x: np.ndarray, rate: float, seed: int, mode: str = TRAIN_MODE, layer_id: int = 0, step: int = 0
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Inverted dropout.

    In train mode each element survives with probability 1 - rate, drawn from
    the counter stream (seed, layer_id, step), and survivors are scaled by
    1 / (1 - rate). Eval mode is the identity.

    Returns:
        Tuple of (output, keep mask of zeros and ones)
    """
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"Dropout rate must lie in [0, 1), got {rate}")
    if mode not in (TRAIN_MODE, EVAL_MODE):
        raise ParameterError(f"Dropout mode must be '{TRAIN_MODE}' or '{EVAL_MODE}', got '{mode}'")

    if mode == EVAL_MODE or rate == 0.0:
        return x.copy(), np.ones_like(x)

    draws = counter_rng(seed, STREAM_DROPOUT, layer_id, step).random(x.shape)
    mask = (draws >= rate).astype(x.dtype)
    return x * mask / x.dtype.type(1.0 - rate), mask


def dropout_grad(mask: np.ndarray, rate: float, grad_out: np.ndarray) -> np.ndarray:
    """Backward pass of inverted dropout."""
    if grad_out.shape != mask.shape:
        raise ShapeError(f"grad_out shape {grad_out.shape} does not match dropout mask {mask.shape}")
    return grad_out * mask / grad_out.dtype.type(1.0 - rate)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    Mean softmax cross-entropy over the rows of logits.

    Args:
        logits: Scores [N x C]
        labels: Class ids [N]

    Returns:
        Tuple of (loss, probabilities [N x C], gradient w.r.t. logits [N x C])

    Raises:
        DataError: If a label lies outside [0, C)
    """
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ShapeError(f"Logits shape {logits.shape} does not match labels shape {labels.shape}")
    batch, classes = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if batch and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"Labels must lie in [0, {classes}), got range [{labels.min()}, {labels.max()}]")

    shifted = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)

    rows = np.arange(batch)
    loss = float(-log_probs[rows, labels].mean())
    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad /= batch
    return loss, probs, grad
