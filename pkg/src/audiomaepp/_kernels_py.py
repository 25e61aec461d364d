"""Pure-numpy twins of the compiled kernels in ``_kernels.pyx`` (same signatures)."""
from __future__ import annotations

import numpy as np
from scipy.special import erf, expit

_SQRT_HALF = float(np.sqrt(0.5))
_INV_SQRT_2PI = float(1.0 / np.sqrt(2.0 * np.pi))


def gelu_forward(x):
    return 0.5 * x * (1.0 + erf(x * _SQRT_HALF))


def gelu_backward(x, dy):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    return dy * (cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT_2PI)


def swiglu_gate_forward(a, g):
    return a * expit(a) * g


def swiglu_gate_backward(a, g, du):
    s = expit(a)
    return du * g * (s + a * s * (1.0 - s)), du * a * s


def softmax_rows(s):
    e = np.exp(s - s.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def softmax_rows_backward(p, dp, scale):
    return p * (dp - (dp * p).sum(-1, keepdims=True)) * scale


def layer_norm_rows(x, scale, shift, eps):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + eps)
    xhat = xc * rstd
    return xhat * scale + shift, xhat, rstd


def layer_norm_rows_backward(dy, xhat, rstd, scale):
    g = dy * scale
    dx = rstd * (g - g.mean(-1, keepdims=True) - xhat * (g * xhat).mean(-1, keepdims=True))
    return dx, (dy * xhat).sum(0), dy.sum(0)
