"""Numpy reference implementations of the elementwise activation kernels.

Used when the compiled ``_ckernels`` extension is unavailable or when
``PURIGRAD_PURE_PYTHON=1`` is set.
"""

import numpy as np


def sigmoid(x):
    # exp overflow for very negative x gives 1/inf == 0, which is the right limit
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def silu(x):
    return x * sigmoid(x)


def silu_grad_from(x, s):
    return s * (1.0 + x * (1.0 - s))


def silu_grad2_from(x, s):
    return s * (1.0 - s) * (2.0 + x * (1.0 - 2.0 * s))


def silu_grad(x):
    return silu_grad_from(x, sigmoid(x))


def silu_grad2(x):
    return silu_grad2_from(x, sigmoid(x))


def soft_leaky_relu(x, a, e):
    return (1.0 - a) * x + a * np.sqrt(x * x + e * e) - a * e


def soft_leaky_relu_grad(x, a, e):
    return (1.0 - a) + a * x / np.sqrt(x * x + e * e)


def soft_leaky_relu_grad2(x, a, e):
    r = x * x + e * e
    return a * e * e / (r * np.sqrt(r))


def leaky_relu(x, slope):
    return np.where(x > 0, x, slope * x)


def leaky_relu_grad(x, slope):
    return np.where(x > 0, 1.0, slope)
