"""Adam optimizer with bias-corrected moment estimates."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


class Adam:
    """Standard Adam: updates parameters in place.

    With default betas and a fresh state, a unit gradient moves a
    parameter by almost exactly ``-lr`` on the first step (the two bias
    corrections cancel).
    """

    def __init__(self, params: list[np.ndarray], lr: float = 0.002,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if not params:
            raise ConfigError("Adam needs at least one parameter array")
        if lr <= 0 or not (0 <= beta1 < 1) or not (0 <= beta2 < 1) or eps <= 0:
            raise ConfigError("invalid Adam hyperparameters")
        self.params = list(params)
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ConfigError(
                f"expected {len(self.params)} gradient arrays, got {len(grads)}")
        self.t += 1
        b1c = 1.0 - self.beta1 ** self.t
        b2c = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / b1c) / (np.sqrt(v / b2c) + self.eps)
