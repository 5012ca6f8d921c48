"""Layers and networks with explicit forward/backward passes.

Tensors are plain numpy arrays laid out ``(batch, channels, z, y, x)``
(rank 5 for volumetric data, rank 2 after flattening).  float32 is the
production dtype; float64 is used for gradient checking.  Convolution is
cross-correlation with zero padding of ``kernel_size // 2`` on each side,
so stride-1 layers preserve spatial dims.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .._validation import check_odd
from ..errors import ConfigError, NumericsError
from . import kernels

ACTIVATIONS = ("none", "relu", "sigmoid")

# when enabled, every layer output is checked for NaN/inf
_DEBUG_NAN_CHECKS = False


def set_debug_nan_checks(enabled: bool) -> None:
    """Toggle per-layer finiteness assertions (off by default; costs a pass over activations)."""
    global _DEBUG_NAN_CHECKS
    _DEBUG_NAN_CHECKS = bool(enabled)


def _check_numerics(arr: np.ndarray, where: str) -> None:
    if _DEBUG_NAN_CHECKS and not np.isfinite(arr).all():
        raise NumericsError(f"non-finite values in {where}")


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...],
                   fan_in: int, fan_out: int, dtype=np.float32) -> np.ndarray:
    """Uniform init on [-b, b] with b = sqrt(6 / (fan_in + fan_out))."""
    if fan_in < 1 or fan_out < 1:
        raise ConfigError("fans must be positive")
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _apply_activation(z: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(z, 0)
    if activation == "sigmoid":
        # numerically stable in both tails
        out = np.empty_like(z)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        out[~pos] = ez / (1.0 + ez)
        return out
    if activation == "none":
        return z
    raise ConfigError(f"unknown activation {activation!r}")


def _activation_grad_from_output(y: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return (y > 0).astype(y.dtype)
    if activation == "sigmoid":
        return y * (1.0 - y)
    return np.ones_like(y)


class Conv3D:
    """3-D convolution layer with fused activation.

    Weights have shape ``(out_channels, in_channels, k, k, k)``; the
    spatial output size is ``(n + 2*(k//2) - k) // stride + 1`` per axis.
    """

    kind = "conv"

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 stride: int = 1, activation: str = "relu", dtype=np.float32):
        if in_channels < 1 or out_channels < 1:
            raise ConfigError("channel counts must be positive")
        check_odd(kernel_size, "kernel_size")
        if stride < 1:
            raise ConfigError("stride must be at least 1")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.activation = activation
        self.dtype = np.dtype(dtype)
        k = kernel_size
        self.weights = np.zeros((out_channels, in_channels, k, k, k), self.dtype)
        self.bias = np.zeros(out_channels, self.dtype)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    def initialize(self, rng: np.random.Generator) -> None:
        k3 = self.kernel_size ** 3
        self.weights[...] = glorot_uniform(
            rng, self.weights.shape,
            fan_in=self.in_channels * k3, fan_out=self.out_channels * k3,
            dtype=self.dtype)
        self.bias[...] = 0

    def _pad(self, x: np.ndarray) -> np.ndarray:
        p = self.kernel_size // 2
        n, c, z, y, xdim = x.shape
        xp = np.zeros((n, c, z + 2 * p, y + 2 * p, xdim + 2 * p), x.dtype)
        xp[:, :, p:p + z, p:p + y, p:p + xdim] = x
        return xp

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 5 or x.shape[1] != self.in_channels:
            raise ConfigError(
                f"expected input (n, {self.in_channels}, z, y, x), got {x.shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        p = self.kernel_size // 2
        xp = self._pad(x)
        out_spatial = [
            (dim + 2 * p - self.kernel_size) // self.stride + 1
            for dim in x.shape[2:]]
        if min(out_spatial) < 1:
            raise ConfigError(f"input {x.shape} too small for kernel {self.kernel_size}")
        out = np.empty((x.shape[0], self.out_channels, *out_spatial), self.dtype)
        kernels.conv3d_forward(xp, self.weights, self.bias, out, self.stride)
        y = _apply_activation(out, self.activation)
        _check_numerics(y, "Conv3D forward")
        if train:
            self._cache = (xp, y)
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise ConfigError("backward called before forward(train=True)")
        xp, y = self._cache
        dz = np.ascontiguousarray(
            grad_out * _activation_grad_from_output(y, self.activation), self.dtype)
        self.grad_weights[...] = 0
        self.grad_bias[...] = 0
        kernels.conv3d_backward_params(xp, dz, self.grad_weights, self.grad_bias, self.stride)
        dxp = np.zeros_like(xp)
        kernels.conv3d_backward_input(dz, self.weights, dxp, self.stride)
        p = self.kernel_size // 2
        n, c, zp, yp, xpdim = dxp.shape
        dx = dxp[:, :, p:zp - p, p:yp - p, p:xpdim - p]
        _check_numerics(dx, "Conv3D backward")
        return np.ascontiguousarray(dx)

    def parameters(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def gradients(self) -> list[np.ndarray]:
        return [self.grad_weights, self.grad_bias]


class Flatten:
    """Reshape ``(n, c, z, y, x)`` to ``(n, c*z*y*x)``."""

    kind = "flatten"

    def __init__(self):
        self._shape: tuple[int, ...] | None = None

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if train:
            self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._shape is None:
            raise ConfigError("backward called before forward(train=True)")
        return grad_out.reshape(self._shape)

    def parameters(self) -> list[np.ndarray]:
        return []

    def gradients(self) -> list[np.ndarray]:
        return []


class Dense:
    """Fully connected layer ``y = act(x @ W.T + b)`` with W of shape (out, in)."""

    kind = "dense"

    def __init__(self, in_features: int, out_features: int,
                 activation: str = "none", dtype=np.float32):
        if in_features < 1 or out_features < 1:
            raise ConfigError("feature counts must be positive")
        if activation not in ACTIVATIONS:
            raise ConfigError(f"activation must be one of {ACTIVATIONS}")
        self.in_features = in_features
        self.out_features = out_features
        self.activation = activation
        self.dtype = np.dtype(dtype)
        self.weights = np.zeros((out_features, in_features), self.dtype)
        self.bias = np.zeros(out_features, self.dtype)
        self.grad_weights = np.zeros_like(self.weights)
        self.grad_bias = np.zeros_like(self.bias)
        self._cache: tuple[np.ndarray, np.ndarray] | None = None

    def initialize(self, rng: np.random.Generator) -> None:
        self.weights[...] = glorot_uniform(
            rng, self.weights.shape,
            fan_in=self.in_features, fan_out=self.out_features, dtype=self.dtype)
        self.bias[...] = 0

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise ConfigError(f"expected input (n, {self.in_features}), got {x.shape}")
        x = np.ascontiguousarray(x, dtype=self.dtype)
        y = _apply_activation(x @ self.weights.T + self.bias, self.activation)
        _check_numerics(y, "Dense forward")
        if train:
            self._cache = (x, y)
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise ConfigError("backward called before forward(train=True)")
        x, y = self._cache
        dz = (grad_out * _activation_grad_from_output(y, self.activation)).astype(self.dtype)
        self.grad_weights[...] = dz.T @ x
        self.grad_bias[...] = dz.sum(axis=0)
        return dz @ self.weights

    def parameters(self) -> list[np.ndarray]:
        return [self.weights, self.bias]

    def gradients(self) -> list[np.ndarray]:
        return [self.grad_weights, self.grad_bias]


class Network:
    """A plain sequential stack of layers."""

    def __init__(self, layers: Sequence):
        if not layers:
            raise ConfigError("network needs at least one layer")
        self.layers = list(layers)

    def initialize(self, rng: np.random.Generator) -> None:
        """Glorot-initialize every parametric layer, in order, from one stream."""
        for layer in self.layers:
            if hasattr(layer, "initialize"):
                layer.initialize(rng)

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            grad_out = layer.backward(grad_out)
        return grad_out

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.layers for p in layer.parameters()]

    def gradients(self) -> list[np.ndarray]:
        return [g for layer in self.layers for g in layer.gradients()]

    def astype(self, dtype) -> "Network":
        """A structural copy of this network with weights cast to ``dtype``."""
        copies = []
        for layer in self.layers:
            if isinstance(layer, Conv3D):
                c = Conv3D(layer.in_channels, layer.out_channels, layer.kernel_size,
                           layer.stride, layer.activation, dtype=dtype)
                c.weights[...] = layer.weights
                c.bias[...] = layer.bias
                copies.append(c)
            elif isinstance(layer, Dense):
                d = Dense(layer.in_features, layer.out_features,
                          layer.activation, dtype=dtype)
                d.weights[...] = layer.weights
                d.bias[...] = layer.bias
                copies.append(d)
            elif isinstance(layer, Flatten):
                copies.append(Flatten())
            else:
                raise ConfigError(f"cannot copy layer of type {type(layer)!r}")
        return Network(copies)
