"""Pure NumPy kernel backend.

Reference implementation of the fused numeric kernels. The compiled
backend in ``_ckernels.pyx`` mirrors these signatures exactly; either one
is selected at import time by :mod:`redbert.kernels`. All reductions run
over the last axis.
"""

import numpy as np
from scipy.special import erf

BACKEND = "numpy"

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT_2PI = 0.3989422804014327


def softmax_fwd(x):
    """Row-stabilized softmax over the last axis."""
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_bwd(y, dy):
    """dx given the forward output y: dx = y * (dy - sum(dy * y))."""
    inner = (dy * y).sum(axis=-1, keepdims=True)
    return y * (dy - inner)


def log_softmax_fwd(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def log_softmax_bwd(y, dy):
    """dx = dy - softmax * sum(dy); y is the forward log-softmax output."""
    return dy - np.exp(y) * dy.sum(axis=-1, keepdims=True)


def gelu_fwd(x):
    """Exact (erf-based) GELU."""
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_bwd(x, dy):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def layer_norm_fwd(x, gamma, beta, eps):
    """Normalize the last axis; returns (y, mean, rstd) for the backward."""
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    y = (x - mean) * rstd * gamma + beta
    return y, mean, rstd


def layer_norm_bwd(x, gamma, mean, rstd, dy):
    xhat = (x - mean) * rstd
    dxhat = dy * gamma
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = rstd * (dxhat - m1 - xhat * m2)
    reduce_axes = tuple(range(dy.ndim - 1))
    dgamma = (dy * xhat).sum(axis=reduce_axes)
    dbeta = dy.sum(axis=reduce_axes)
    return dx, dgamma, dbeta


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    """Bias-corrected Adam step, in place on param/m/v. step counts from 1."""
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    param -= lr * mhat / (np.sqrt(vhat) + eps)
