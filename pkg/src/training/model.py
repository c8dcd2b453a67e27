"""
The convolutional classifier: optional normalization site, three
conv 3x3 -> ReLU -> max-pool 2x2 blocks, flatten, dropout and a dense
softmax layer.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from batchnorm.batchnorm_layer import BatchNormParams, BNCache, bn_backward, bn_forward_eval, bn_forward_train
from errors import ShapeError, StateError
from numerics.layers import (
    EVAL_MODE,
    TRAIN_MODE,
    ConvParams,
    DenseParams,
    LayerCache,
    conv2d,
    conv2d_grad,
    conv_output_extent,
    dense_affine,
    dense_affine_grad,
    dropout,
    dropout_grad,
    maxpool2d,
    maxpool2d_grad,
    relu,
    relu_grad,
)
from numerics.tensor import STANDARD_DTYPE, STREAM_INIT, counter_rng

logger = logging.getLogger(__name__)

KERNEL_SIZE = 3
POOL_SIZE = 2
DROPOUT_LAYER_ID = 1
DENSE_INIT_ID = 3

SITE_NONE = 'none'
SITE_BN = 'bn'
SITE_ADAPTIVE = 'adaptive'
SCENARIO_SITES = {'no_bn': SITE_NONE, 'bn': SITE_BN, 'adaptive': SITE_ADAPTIVE}


@dataclass
class ForwardState:
    """Caches of one training forward pass."""
    bn_cache: Optional[BNCache]
    blocks: List[Tuple[LayerCache, LayerCache, LayerCache]] = field(default_factory=list)
    pooled_shape: Tuple[int, ...] = ()
    dropout_mask: Optional[np.ndarray] = None
    dense_cache: Optional[LayerCache] = None


def _kaiming_uniform(seed: int, layer_id: int, shape: Sequence[int], fan_in: int, dtype: type) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return counter_rng(seed, STREAM_INIT, layer_id).uniform(-bound, bound, size=shape).astype(dtype)


class Model:
    """
    Layer parameters, the shape chain and the forward/backward passes.

    The normalization site exists for the bn and adaptive scenarios; whether
    it runs on a given training batch is decided by the caller.
    """

    def __init__(
        self, convs: List[ConvParams], dense: DenseParams, site: str, bn: Optional[BatchNormParams],
        dropout_rate: float, seed: int, shape_chain: List[Tuple[str, Tuple[int, ...]]],
        adaptive_eval: str = 'identity'
    ):
        if site != SITE_NONE and bn is None:
            raise StateError(f"A '{site}' normalization site needs BatchNorm parameters")
        self.convs = convs
        self.dense = dense
        self.site = site
        self.bn = bn
        self.dropout_rate = dropout_rate
        self.seed = seed
        self.shape_chain = shape_chain
        self.adaptive_eval = adaptive_eval

    def parameters(self) -> Dict[str, np.ndarray]:
        """Trainable arrays keyed by name, in layer order."""
        params: Dict[str, np.ndarray] = {}
        if self.bn is not None:
            params['bn.gamma'] = self.bn.gamma
            params['bn.beta'] = self.bn.beta
        for i, conv in enumerate(self.convs, 1):
            params[f'conv{i}.kernels'] = conv.kernels
            params[f'conv{i}.bias'] = conv.bias
        params['dense.weights'] = self.dense.weights
        params['dense.bias'] = self.dense.bias
        return params

    def load_parameters(self, params: Dict[str, np.ndarray]) -> None:
        """Assign arrays produced by the optimizer back into the layers."""
        if self.bn is not None:
            self.bn.gamma = params['bn.gamma']
            self.bn.beta = params['bn.beta']
        for i, conv in enumerate(self.convs, 1):
            conv.kernels = params[f'conv{i}.kernels']
            conv.bias = params[f'conv{i}.bias']
        self.dense.weights = params['dense.weights']
        self.dense.bias = params['dense.bias']

    def parameter_count(self) -> int:
        return int(sum(array.size for array in self.parameters().values()))

    def forward_train(self, x: np.ndarray, normalize: bool, step: int) -> Tuple[np.ndarray, ForwardState]:
        """
        Training-mode forward pass.

        Args:
            x: Batch [N x C x H x W]
            normalize: Run the normalization site on this batch
            step: Global step, keys the dropout stream

        Returns:
            Tuple of (logits, state for backward)
        """
        bn_cache = None
        out = x
        if normalize:
            if self.bn is None:
                raise StateError("This model has no normalization site")
            out, bn_cache = bn_forward_train(out, self.bn)

        state = ForwardState(bn_cache=bn_cache)
        for conv in self.convs:
            out, conv_cache = conv2d(out, conv)
            out, relu_cache = relu(out)
            out, pool_cache = maxpool2d(out, POOL_SIZE)
            state.blocks.append((conv_cache, relu_cache, pool_cache))

        state.pooled_shape = out.shape
        flat = out.reshape(out.shape[0], -1)
        dropped, state.dropout_mask = dropout(flat, self.dropout_rate, self.seed, TRAIN_MODE, DROPOUT_LAYER_ID, step)
        logits, state.dense_cache = dense_affine(dropped, self.dense)
        return logits, state

    def backward(self, state: ForwardState, grad_logits: np.ndarray) -> Dict[str, np.ndarray]:
        """Gradients of every parameter that took part in the forward pass."""
        grads: Dict[str, np.ndarray] = {}
        grad_dropped, grads['dense.weights'], grads['dense.bias'] = dense_affine_grad(state.dense_cache, grad_logits)
        grad = dropout_grad(state.dropout_mask, self.dropout_rate, grad_dropped).reshape(state.pooled_shape)

        for i in range(len(self.convs), 0, -1):
            conv_cache, relu_cache, pool_cache = state.blocks[i - 1]
            grad = maxpool2d_grad(pool_cache, grad)
            grad = relu_grad(relu_cache, grad)
            grad, grads[f'conv{i}.kernels'], grads[f'conv{i}.bias'] = conv2d_grad(conv_cache, grad)

        if state.bn_cache is not None:
            _, grads['bn.gamma'], grads['bn.beta'] = bn_backward(state.bn_cache, grad, self.bn)
        return grads

    def _normalize_eval(self, x: np.ndarray) -> np.ndarray:
        if self.site == SITE_BN:
            return bn_forward_eval(x, self.bn)
        if self.site == SITE_ADAPTIVE and self.adaptive_eval == 'running' and self.bn.batches_seen:
            return bn_forward_eval(x, self.bn)
        return x

    def predict_logits(self, x: np.ndarray) -> np.ndarray:
        """Evaluation-mode forward pass: dropout is the identity."""
        out = self._normalize_eval(x)
        for conv in self.convs:
            out, _ = conv2d(out, conv)
            out, _ = relu(out)
            out, _ = maxpool2d(out, POOL_SIZE)
        flat = out.reshape(out.shape[0], -1)
        flat, _ = dropout(flat, self.dropout_rate, self.seed, EVAL_MODE)
        logits, _ = dense_affine(flat, self.dense)
        return logits

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Top-1 class ids."""
        return np.argmax(self.predict_logits(x), axis=1)


def infer_shape_chain(
    input_shape: Sequence[int], conv_filters: Sequence[int], class_count: int,
    padding: int = 0, stride: int = 1, site: str = SITE_NONE
) -> List[Tuple[str, Tuple[int, ...]]]:
    """
    Walk the architecture and record each layer's output shape (without
    the batch axis).

    Raises:
        ShapeError: If the input cannot survive three conv/pool blocks
    """
    channels, height, width = input_shape
    chain = [('input', (channels, height, width))]
    if site != SITE_NONE:
        chain.append((f'{site}_norm', (channels, height, width)))

    for i, filters in enumerate(conv_filters, 1):
        try:
            height = conv_output_extent(height, KERNEL_SIZE, padding, stride, 'height')
            width = conv_output_extent(width, KERNEL_SIZE, padding, stride, 'width')
        except ShapeError as e:
            raise ShapeError(f"Input {tuple(input_shape)} is too small for conv block {i}: {e}")
        channels = filters
        chain.append((f'conv{i}', (channels, height, width)))
        chain.append((f'relu{i}', (channels, height, width)))
        if height < POOL_SIZE or width < POOL_SIZE:
            raise ShapeError(f"Input {tuple(input_shape)} is too small to pool after conv block {i}")
        height, width = height // POOL_SIZE, width // POOL_SIZE
        chain.append((f'pool{i}', (channels, height, width)))

    features = channels * height * width
    chain.append(('flatten', (features,)))
    chain.append(('dropout', (features,)))
    chain.append(('dense', (class_count,)))
    return chain


def build_model(config, input_shape: Sequence[int], class_count: int) -> Model:
    """
    Build and initialize the classifier for a TrainConfig.

    Weights are Kaiming-uniform over fan-in from per-layer seeded streams,
    so a layer's initialization does not depend on which other layers exist.

    Args:
        config: TrainConfig
        input_shape: (C, H, W)
        class_count: Width of the dense softmax layer

    Returns:
        Model
    """
    site = SCENARIO_SITES[config.scenario]
    chain = infer_shape_chain(input_shape, config.conv_filters, class_count,
                              config.conv_padding, config.conv_stride, site)
    dtype = STANDARD_DTYPE

    convs = []
    in_channels = input_shape[0]
    for layer_id, filters in enumerate(config.conv_filters):
        fan_in = in_channels * KERNEL_SIZE * KERNEL_SIZE
        kernels = _kaiming_uniform(config.seed, layer_id, (filters, in_channels, KERNEL_SIZE, KERNEL_SIZE),
                                   fan_in, dtype)
        convs.append(ConvParams(kernels, np.zeros(filters, dtype=dtype), config.conv_stride, config.conv_padding))
        in_channels = filters

    features = chain[-2][1][0]
    dense = DenseParams(
        _kaiming_uniform(config.seed, DENSE_INIT_ID, (features, class_count), features, dtype),
        np.zeros(class_count, dtype=dtype),
    )
    bn = None
    if site != SITE_NONE:
        bn = BatchNormParams.initialize(input_shape[0], config.bn_eps, config.bn_momentum, dtype)

    model = Model(convs, dense, site, bn, config.dropout_rate, config.seed, chain, config.adaptive_eval)
    logger.debug(f"Built model with {model.parameter_count()} parameters: {chain}")
    return model
