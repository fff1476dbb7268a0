"""Seeded convolutional feature extractor with hand-written backward pass.

A plain stack of 3x3 conv + ReLU layers, padding 1, strides of 1 or 2.
The spatial downsample factor is the product of the strides, so feature-map
coordinates are image coordinates divided by that factor exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .numerics import conv2d_backward, conv2d_forward

DEFAULT_LAYERS = ((16, 2), (32, 2), (64, 2))


@dataclass(frozen=True)
class EncoderConfig:
    layers: tuple = DEFAULT_LAYERS  # (out_channels, stride) per layer
    in_channels: int = 1

    def __post_init__(self):
        if len(self.layers) < 1:
            raise DimensionError("encoder needs at least one layer")
        for oc, stride in self.layers:
            if stride not in (1, 2):
                raise DimensionError(f"stride must be 1 or 2, got {stride}")
            if oc < 1:
                raise DimensionError(f"out_channels must be >= 1, got {oc}")

    @property
    def downsample_factor(self) -> int:
        s = 1
        for _, stride in self.layers:
            s *= stride
        return s

    @property
    def out_channels(self) -> int:
        return self.layers[-1][0]


@dataclass
class FeatureMap:
    data: np.ndarray  # (C', H', W')
    downsample_factor: int


def encoder_init(config: EncoderConfig, rng: np.random.Generator) -> dict:
    """He-scaled kernels (std sqrt(2/fan_in)), zero biases."""
    params = {}
    cin = config.in_channels
    for i, (cout, _) in enumerate(config.layers):
        fan_in = cin * 9
        std = np.sqrt(2.0 / fan_in)
        params[f"enc{i}_w"] = rng.normal(0.0, std, size=(cout, cin, 3, 3))
        params[f"enc{i}_b"] = np.zeros(cout)
        cin = cout
    return params


def encoder_forward(params: dict, config: EncoderConfig, image: np.ndarray):
    """conv -> ReLU per layer; returns (FeatureMap, cache for backward)."""
    x = np.asarray(image, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] != config.in_channels:
        raise DimensionError(f"expected ({config.in_channels}, H, W) input, got {x.shape}")
    cache = []
    for i, (_, stride) in enumerate(config.layers):
        if x.shape[1] % stride or x.shape[2] % stride:
            raise DimensionError(
                f"layer {i}: input {x.shape[1]}x{x.shape[2]} not divisible by stride {stride}")
        pre, cols = conv2d_forward(x, params[f"enc{i}_w"], stride=stride, pad=1)
        pre = pre + params[f"enc{i}_b"][:, None, None]
        out = np.maximum(pre, 0.0)
        cache.append((x.shape, cols, pre > 0.0))
        x = out
    return FeatureMap(data=x, downsample_factor=config.downsample_factor), cache


def encoder_backward(params: dict, config: EncoderConfig, cache: list,
                     grad_out: np.ndarray):
    """Exact gradients of encoder_forward; returns (grad_params, grad_input)."""
    grads = {}
    g = np.asarray(grad_out, dtype=np.float64)
    for i in reversed(range(len(config.layers))):
        in_shape, cols, relu_mask = cache[i]
        if g.shape != relu_mask.shape:
            raise DimensionError(f"layer {i}: grad shape {g.shape} != output {relu_mask.shape}")
        stride = config.layers[i][1]
        gpre = g * relu_mask
        grads[f"enc{i}_b"] = gpre.sum(axis=(1, 2))
        gk, gin = conv2d_backward(gpre, cols, params[f"enc{i}_w"], in_shape,
                                  stride=stride, pad=1)
        grads[f"enc{i}_w"] = gk
        g = gin
    return grads, g
