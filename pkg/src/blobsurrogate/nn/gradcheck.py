"""Finite-difference verification of analytic gradients.

This is the independent oracle for the backpropagation code: central
differences of the scalar loss, evaluated through the same forward pass,
compared entry-by-entry against the gradients the backward pass reports.
Run it on float64 networks; float32 cannot resolve the tolerances.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import ConfigError
from .layers import Network

LossFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def check_gradients(
    network: Network,
    x: np.ndarray,
    target: np.ndarray,
    loss_fn: LossFn,
    rng: np.random.Generator,
    n_samples: int = 24,
    step: float = 1e-5,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    Samples ``n_samples`` random entries from every parameter array and
    from the input, perturbs each by ``±step``, and compares the loss
    slope to the backward pass.  The relative error of a pair ``(a, n)``
    is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if n_samples < 1:
        raise ConfigError("n_samples must be at least 1")
    params = network.parameters()
    if any(p.dtype != np.float64 for p in params) or x.dtype != np.float64:
        raise ConfigError("gradient checks require float64 network and input")

    def loss_at() -> float:
        return loss_fn(network.forward(x), target)[0]

    out = network.forward(x, train=True)
    loss, dldy = loss_fn(out, target)
    dldx = network.backward(dldy)
    analytic = network.gradients()

    max_rel = 0.0

    def compare(arr: np.ndarray, grad: np.ndarray) -> None:
        nonlocal max_rel
        flat_n = arr.size
        take = min(n_samples, flat_n)
        idx = rng.choice(flat_n, size=take, replace=False)
        for i in idx:
            orig = arr.flat[i]
            arr.flat[i] = orig + step
            up = loss_at()
            arr.flat[i] = orig - step
            down = loss_at()
            arr.flat[i] = orig
            numeric = (up - down) / (2.0 * step)
            a = float(grad.flat[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_rel = max(max_rel, rel)

    for p, g in zip(params, analytic):
        compare(p, g)
    compare(x, dldx)
    return max_rel
