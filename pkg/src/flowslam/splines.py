"""Monotone rational-quadratic splines with identity tails.

A spline row maps the real line onto itself. Inside ``[-bound, bound]`` it is
piecewise rational-quadratic over ``num_bins`` bins; outside it is the
identity, so the boundary slopes are pinned to 1.

Unconstrained parameters come in one trailing axis of length
``3 * num_bins - 1``: bin widths, bin heights, interior knot slopes.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit, softmax

MIN_BIN_WIDTH = 1e-3
MIN_BIN_HEIGHT = 1e-3
MIN_DERIVATIVE = 1e-3


def num_raw_params(num_bins: int) -> int:
    return 3 * num_bins - 1


def softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


def inverse_softplus(y):
    return y + np.log(-np.expm1(-y))


def identity_raw(num_bins: int) -> np.ndarray:
    """Raw parameters for which the spline is the identity map."""
    raw = np.zeros(num_raw_params(num_bins))
    raw[2 * num_bins:] = inverse_softplus(1.0 - MIN_DERIVATIVE)
    return raw


@dataclass
class SplineKnots:
    """Constrained spline parameters, one set per leading index."""

    xk: np.ndarray        # (..., K + 1) knot abscissae, pinned to +-bound
    yk: np.ndarray        # (..., K + 1) knot ordinates
    widths: np.ndarray    # (..., K)
    heights: np.ndarray   # (..., K)
    derivs: np.ndarray    # (..., K + 1), ends fixed at 1
    soft_w: np.ndarray    # softmax outputs kept for the backward pass
    soft_h: np.ndarray
    raw_d: np.ndarray


def _bins(raw, bound, min_size):
    k = raw.shape[-1]
    soft = softmax(raw, axis=-1)
    sizes = 2.0 * bound * (min_size + (1.0 - min_size * k) * soft)
    knots = np.concatenate([np.zeros(raw.shape[:-1] + (1,)), np.cumsum(sizes, axis=-1)], axis=-1) - bound
    knots[..., -1] = bound
    return soft, sizes, knots


def constrain(raw: np.ndarray, num_bins: int, bound: float) -> SplineKnots:
    raw = np.asarray(raw, dtype=float)
    raw_w = raw[..., :num_bins]
    raw_h = raw[..., num_bins:2 * num_bins]
    raw_d = raw[..., 2 * num_bins:]
    soft_w, widths, xk = _bins(raw_w, bound, MIN_BIN_WIDTH)
    soft_h, heights, yk = _bins(raw_h, bound, MIN_BIN_HEIGHT)
    ones = np.ones(raw.shape[:-1] + (1,))
    derivs = np.concatenate([ones, MIN_DERIVATIVE + softplus(raw_d), ones], axis=-1)
    return SplineKnots(xk, yk, widths, heights, derivs, soft_w, soft_h, raw_d)


def _take(a, idx):
    return np.take_along_axis(a, idx[..., None], axis=-1)[..., 0]


def _locate(knots, v):
    k = knots.shape[-1] - 1
    idx = np.sum(v[..., None] >= knots[..., 1:-1], axis=-1)
    return np.clip(idx, 0, k - 1)


class _BinState:
    """Per-element quantities of the bin that contains each input."""

    def __init__(self, sk: SplineKnots, idx):
        self.idx = idx
        self.x0 = _take(sk.xk, idx)
        self.y0 = _take(sk.yk, idx)
        self.w = _take(sk.widths, idx)
        self.h = _take(sk.heights, idx)
        self.d0 = _take(sk.derivs, idx)
        self.d1 = _take(sk.derivs, idx + 1)
        self.s = self.h / self.w


def forward(x, raw, num_bins: int, bound: float, *, with_grad: bool = False):
    """Evaluate the spline at ``x`` elementwise.

    ``raw`` has shape ``x.shape + (3K - 1,)``. Returns ``(y, logdet)``; with
    ``with_grad`` a third item ``backward(grad_y, grad_logdet)`` returns the
    gradient with respect to ``raw`` of ``sum(grad_y * y + grad_logdet * logdet)``.
    """
    x = np.asarray(x, dtype=float)
    sk = constrain(raw, num_bins, bound)
    inside = (x >= -bound) & (x <= bound)
    xc = np.clip(x, -bound, bound)
    b = _BinState(sk, _locate(sk.xk, xc))
    xi = (xc - b.x0) / b.w
    xi = np.clip(xi, 0.0, 1.0)
    t = xi * (1.0 - xi)
    s, d0, d1, h = b.s, b.d0, b.d1, b.h
    num = s * xi * xi + d0 * t
    den = s + (d0 + d1 - 2.0 * s) * t
    m = d1 * xi * xi + 2.0 * s * t + d0 * (1.0 - xi) ** 2
    y_in = b.y0 + h * num / den
    logg_in = 2.0 * np.log(s) + np.log(m) - 2.0 * np.log(den)
    y = np.where(inside, y_in, x)
    logdet = np.where(inside, logg_in, 0.0)
    if not with_grad:
        return y, logdet

    den2 = den * den
    dden_dxi = (d0 + d1 - 2.0 * s) * (1.0 - 2.0 * xi)
    dnum_dxi = 2.0 * s * xi + d0 * (1.0 - 2.0 * xi)
    dm_dxi = 2.0 * d1 * xi + 2.0 * s * (1.0 - 2.0 * xi) - 2.0 * d0 * (1.0 - xi)
    # partials of y
    y_xi = h * (dnum_dxi * den - num * dden_dxi) / den2
    y_s = h * (xi * xi * den - num * (1.0 - 2.0 * t)) / den2
    y_d0 = h * t * (den - num) / den2
    y_d1 = -h * num * t / den2
    y_h = num / den
    # partials of log slope
    l_xi = dm_dxi / m - 2.0 * dden_dxi / den
    l_s = 2.0 / s + 2.0 * t / m - 2.0 * (1.0 - 2.0 * t) / den
    l_d0 = (1.0 - xi) ** 2 / m - 2.0 * t / den
    l_d1 = xi * xi / m - 2.0 * t / den

    def backward(grad_y, grad_logdet):
        gy = np.where(inside, np.broadcast_to(grad_y, x.shape), 0.0)
        gl = np.where(inside, np.broadcast_to(grad_logdet, x.shape), 0.0)
        g_xi = gy * y_xi + gl * l_xi
        g_s = gy * y_s + gl * l_s
        w = b.w
        g_x0 = -g_xi / w
        g_w = -g_xi * xi / w - g_s * s / w
        g_h = gy * y_h + g_s / w
        g_d0 = gy * y_d0 + gl * l_d0
        g_d1 = gy * y_d1 + gl * l_d1
        return _raw_gradient(sk, b.idx, num_bins, bound, g_x0, g_w, gy, g_h, g_d0, g_d1)

    return y, logdet, backward


def _scatter(idx, values, k):
    out = np.zeros(idx.shape + (k,))
    np.put_along_axis(out, idx[..., None], values[..., None], axis=-1)
    return out


def _bin_size_gradient(idx, g_knot, g_size, k):
    # knot j = -bound + sum_{i<j} size_i, so d knot_idx / d size_i = [i < idx]
    below = np.arange(k) < idx[..., None]
    return g_knot[..., None] * below + _scatter(idx, g_size, k)


def _softmax_backward(soft, g_sizes, bound, min_size):
    k = soft.shape[-1]
    g_soft = g_sizes * 2.0 * bound * (1.0 - min_size * k)
    return soft * (g_soft - np.sum(g_soft * soft, axis=-1, keepdims=True))


def _raw_gradient(sk, idx, k, bound, g_x0, g_w, g_y0, g_h, g_d0, g_d1):
    g_widths = _bin_size_gradient(idx, g_x0, g_w, k)
    g_heights = _bin_size_gradient(idx, g_y0, g_h, k)
    g_raw_w = _softmax_backward(sk.soft_w, g_widths, bound, MIN_BIN_WIDTH)
    g_raw_h = _softmax_backward(sk.soft_h, g_heights, bound, MIN_BIN_HEIGHT)
    g_derivs = _scatter(idx, g_d0, k + 1) + _scatter(idx + 1, g_d1, k + 1)
    g_raw_d = g_derivs[..., 1:-1] * expit(sk.raw_d)
    return np.concatenate([g_raw_w, g_raw_h, g_raw_d], axis=-1)


def inverse(y, raw, num_bins: int, bound: float):
    """Invert :func:`forward` in closed form (stable quadratic root)."""
    y = np.asarray(y, dtype=float)
    sk = constrain(raw, num_bins, bound)
    inside = (y >= -bound) & (y <= bound)
    yc = np.clip(y, -bound, bound)
    b = _BinState(sk, _locate(sk.yk, yc))
    dy = yc - b.y0
    s, d0, d1, h = b.s, b.d0, b.d1, b.h
    c_sum = d0 + d1 - 2.0 * s
    a = h * (s - d0) + dy * c_sum
    bb = h * d0 - dy * c_sum
    c = -s * dy
    disc = np.maximum(bb * bb - 4.0 * a * c, 0.0)
    xi = 2.0 * c / (-bb - np.sqrt(disc))
    xi = np.clip(xi, 0.0, 1.0)
    x_in = b.x0 + xi * b.w
    return np.where(inside, x_in, y)
