"""Forward/backward primitives for the encoder (float64 numpy)."""

import numpy as np
from scipy.special import erf

LN_EPS = 1e-12
_SQRT2 = np.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


def normalize(x, eps=LN_EPS):
    """Zero-mean, unit-variance normalization over the last axis (before gain/bias)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps)


def layer_norm(x, gamma, beta, eps=LN_EPS):
    return normalize(x, eps) * gamma + beta


def layer_norm_backward(dy, x, gamma, eps=LN_EPS):
    """Returns (dx, dgamma, dbeta)."""
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    n = xc * rstd
    dn = dy * gamma
    dx = rstd * (dn - dn.mean(axis=-1, keepdims=True) - n * np.mean(dn * n, axis=-1, keepdims=True))
    red = tuple(range(dy.ndim - 1))
    return dx, (dy * n).sum(axis=red), dy.sum(axis=red)


def gelu(x):
    """Exact (erf) GELU."""
    return 0.5 * x * (1.0 + erf(x / _SQRT2))


def gelu_backward(dy, x):
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
    return dy * (cdf + x * pdf)


def softmax(x, axis=-1):
    m = np.max(x, axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(dp, p, axis=-1):
    return p * (dp - np.sum(dp * p, axis=axis, keepdims=True))


def linear(x, w, b=None):
    y = x @ w.T
    return y if b is None else y + b


def linear_backward(dy, x, w):
    """Returns (dx, dw, db) for ``y = x @ w.T + b``."""
    dx = dy @ w
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    return dx, dy2.T @ x2, dy2.sum(axis=0)


def cross_entropy(logits, labels):
    """Mean cross-entropy and its gradient w.r.t. ``logits``."""
    p = softmax(logits)
    n = logits.shape[0]
    loss = -np.mean(np.log(p[np.arange(n), labels] + 1e-300))
    grad = p.copy()
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n
