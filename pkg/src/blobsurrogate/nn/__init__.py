"""A small from-scratch neural network engine for volumetric data.

Tensors are numpy arrays, rank at most 5, laid out
``(batch, channels, z, y, x)``.  float32 is the production dtype;
float64 exists for gradient checking.
"""

from .gradcheck import check_gradients
from .layers import (
    ACTIVATIONS,
    Conv3D,
    Dense,
    Flatten,
    Network,
    glorot_uniform,
    set_debug_nan_checks,
)
from .losses import bce_loss, dice_loss
from .optim import Adam
from .weights_io import load_network, save_network

__all__ = [
    "ACTIVATIONS",
    "Adam",
    "Conv3D",
    "Dense",
    "Flatten",
    "Network",
    "bce_loss",
    "check_gradients",
    "dice_loss",
    "glorot_uniform",
    "load_network",
    "save_network",
    "set_debug_nan_checks",
]
