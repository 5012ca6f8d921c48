"""Loss functions returning ``(scalar_loss, gradient_wrt_prediction)``."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError


def dice_loss(pred: np.ndarray, target: np.ndarray,
              smooth: float = 1.0) -> tuple[float, np.ndarray]:
    """Soft Dice loss over the whole tensor.

    ``loss = 1 - (2*sum(p*t) + s) / (sum(p^2) + sum(t^2) + s)``.  The
    smoothing term keeps the loss defined (and equal to 0) when both
    prediction and target are all zero.
    """
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if smooth <= 0:
        raise ConfigError("smooth must be positive")
    p = pred.astype(np.float64, copy=False)
    t = target.astype(np.float64, copy=False)
    num = 2.0 * float(np.sum(p * t)) + smooth
    den = float(np.sum(p * p)) + float(np.sum(t * t)) + smooth
    loss = 1.0 - num / den
    grad = (2.0 * p * num / den - 2.0 * t) / den
    return float(loss), grad.astype(pred.dtype)


def bce_loss(pred: np.ndarray, target: np.ndarray,
             clip: float = 1e-7) -> tuple[float, np.ndarray]:
    """Binary cross-entropy, averaged over all elements.

    Predictions are clipped into ``[clip, 1 - clip]`` before the logs;
    the gradient is zero where clipping is active (matching the clipped
    function's true derivative).
    """
    if pred.shape != target.shape:
        raise ConfigError(f"shape mismatch: {pred.shape} vs {target.shape}")
    if not (0 < clip < 0.5):
        raise ConfigError("clip must lie in (0, 0.5)")
    p = pred.astype(np.float64, copy=False)
    t = target.astype(np.float64, copy=False)
    pc = np.clip(p, clip, 1.0 - clip)
    n = p.size
    loss = float(-np.sum(t * np.log(pc) + (1.0 - t) * np.log(1.0 - pc)) / n)
    inside = (p > clip) & (p < 1.0 - clip)
    grad = np.where(inside, (pc - t) / (pc * (1.0 - pc)) / n, 0.0)
    return loss, grad.astype(pred.dtype)
