"""Activation functions that map raw optimizable values to physical ranges.

Each function accepts scalars or numpy arrays. Backward helpers return the
gradient w.r.t. the raw input given an upstream gradient.
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit


def tanh01(x):
    """Smooth opacity constraint onto [0, 1] with midpoint at x = 0.5."""
    # 0.5 * (tanh(4x - 2) + 1) written as a logistic to keep the lower tail exact
    return expit(8.0 * np.asarray(x, dtype=np.float64) - 4.0)


def tanh01_grad(x):
    z = 8.0 * np.asarray(x, dtype=np.float64) - 4.0
    return 8.0 * expit(z) * expit(-z)


def lilu_forward(x):
    """Forward pass is exactly ReLU."""
    return np.maximum(x, 0.0)


def lilu_backward(x, upstream_grad):
    """Pseudo-gradient of LiLU.

    The gradient is dropped only where the input already sits at or below the
    border and a descent step (``x -= lr * g`` with ``g > 0``) would push it
    further out. Growth back into the valid range is always allowed.
    """
    x = np.asarray(x)
    g = np.asarray(upstream_grad, dtype=np.float64)
    blocked = (x <= 0.0) & (g > 0.0)
    return np.where(blocked, 0.0, g)


def softplus(x):
    """Overflow-safe log(1 + exp(x))."""
    x = np.asarray(x, dtype=np.float64)
    return np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0.0)


def softplus_grad(x):
    """Logistic sigmoid, the derivative of softplus."""
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))
