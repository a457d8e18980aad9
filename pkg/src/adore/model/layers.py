"""Elementwise layers with hand-written backward passes."""

from __future__ import annotations

import math

import numpy as np

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


def layer_norm(x, g, b):
    return layer_norm_forward(x, g, b)[0]


def layer_norm_forward(x, g, b):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(-1, keepdims=True) + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def layer_norm_backward(dy, cache):
    xhat, rstd, g = cache
    axes = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axes)
    db = dy.sum(axes)
    dxhat = dy * g
    dx = rstd * (dxhat - dxhat.mean(-1, keepdims=True)
                 - xhat * (dxhat * xhat).mean(-1, keepdims=True))
    return dx, dg, db


def gelu(u):
    return gelu_forward(u)[0]


def gelu_forward(u):
    """Tanh-approximated GELU; returns ``(out, t)`` where ``t`` feeds :func:`gelu_grad`."""
    t = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u * u))
    return 0.5 * u * (1.0 + t), t


def gelu_grad(u, t=None):
    if t is None:
        t = gelu_forward(u)[1]
    return 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * _GELU_C * (1.0 + 3 * 0.044715 * u * u)
