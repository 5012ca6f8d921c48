"""Binary serialization of sequential networks ("BSW1").

Layout: 4-byte magic ``BSW1``; little-endian uint32 layer count; then per
parametric layer: uint32 kind (0 = conv, 1 = dense), uint32 in, uint32
out, uint32 kernel size (0 for dense), uint32 stride (1 for dense),
uint32 activation code (0 none, 1 relu, 2 sigmoid); then the float32
little-endian weights followed by the biases.  Flatten layers carry no
parameters and are reinserted on load before the first dense layer.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError
from .layers import ACTIVATIONS, Conv3D, Dense, Flatten, Network

_MAGIC = b"BSW1"
_KIND_CONV = 0
_KIND_DENSE = 1


def save_network(network: Network, path: str | Path) -> None:
    """Serialize a network's parametric layers (weights stored as float32)."""
    parametric = [l for l in network.layers if isinstance(l, (Conv3D, Dense))]
    chunks = [_MAGIC, struct.pack("<I", len(parametric))]
    for layer in parametric:
        act = ACTIVATIONS.index(layer.activation)
        if isinstance(layer, Conv3D):
            header = struct.pack(
                "<6I", _KIND_CONV, layer.in_channels, layer.out_channels,
                layer.kernel_size, layer.stride, act)
        else:
            header = struct.pack(
                "<6I", _KIND_DENSE, layer.in_features, layer.out_features, 0, 1, act)
        chunks.append(header)
        chunks.append(np.ascontiguousarray(layer.weights, dtype="<f4").tobytes())
        chunks.append(np.ascontiguousarray(layer.bias, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_network(path: str | Path) -> Network:
    """Rebuild a network from a BSW1 file, validating structure and sizes."""
    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != _MAGIC:
        raise FormatError(f"{path}: not a BSW1 weight file")
    (n_layers,) = struct.unpack_from("<I", raw, 4)
    offset = 8
    layers: list = []
    seen_dense = False
    for li in range(n_layers):
        if offset + 24 > len(raw):
            raise FormatError(f"{path}: truncated at layer {li} header")
        kind, n_in, n_out, k, stride, act = struct.unpack_from("<6I", raw, offset)
        offset += 24
        if act >= len(ACTIVATIONS):
            raise FormatError(f"{path}: unknown activation code {act}")
        activation = ACTIVATIONS[act]
        if kind == _KIND_CONV:
            n_weights = n_out * n_in * k ** 3
            make = lambda: Conv3D(n_in, n_out, k, stride, activation)
        elif kind == _KIND_DENSE:
            n_weights = n_out * n_in
            make = lambda: Dense(n_in, n_out, activation)
            if not seen_dense and any(isinstance(l, Conv3D) for l in layers):
                layers.append(Flatten())
            seen_dense = True
        else:
            raise FormatError(f"{path}: unknown layer kind {kind}")
        need = 4 * (n_weights + n_out)
        if offset + need > len(raw):
            raise FormatError(f"{path}: truncated at layer {li} parameters")
        try:
            layer = make()
        except Exception as exc:
            raise FormatError(f"{path}: invalid layer {li} shape: {exc}") from exc
        w = np.frombuffer(raw, dtype="<f4", count=n_weights, offset=offset)
        offset += 4 * n_weights
        b = np.frombuffer(raw, dtype="<f4", count=n_out, offset=offset)
        offset += 4 * n_out
        layer.weights[...] = w.reshape(layer.weights.shape)
        layer.bias[...] = b
        layers.append(layer)
    if offset != len(raw):
        raise FormatError(f"{path}: {len(raw) - offset} trailing bytes")
    return Network(layers)
