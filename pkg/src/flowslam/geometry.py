"""Planar pose algebra and the measurement models built on it.

Poses are stored as float arrays ``(..., 3)`` holding ``(x, y, theta)``;
points as ``(..., 2)``; tangent vectors as ``(..., 3)`` holding
``(dx, dy, dtheta)``. Every function broadcasts over leading axes so the
samplers can push thousands of draws through one call.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

TWO_PI = 2.0 * np.pi

# below this |theta| the closed forms switch to their Taylor expansions
_SMALL_ANGLE = 1e-7


class Pose2(NamedTuple):
    x: float
    y: float
    theta: float

    def array(self) -> np.ndarray:
        return np.array([self.x, self.y, wrap_angle(self.theta)], dtype=float)


class Point2(NamedTuple):
    x: float
    y: float

    def array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=float)


class Tangent2(NamedTuple):
    dx: float
    dy: float
    dtheta: float

    def array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta], dtype=float)


def wrap_angle(a):
    """Wrap angles to the half-open interval [-pi, pi)."""
    a = np.asarray(a, dtype=float)
    out = np.mod(a + np.pi, TWO_PI) - np.pi
    # np.mod can round up to exactly 2*pi for inputs a hair below a multiple of it
    out = np.where(out >= np.pi, out - TWO_PI, out)
    return out if out.ndim else float(out)


def identity() -> np.ndarray:
    return np.zeros(3)


def compose(a, b) -> np.ndarray:
    """Group product ``a (+) b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c, s = np.cos(a[..., 2]), np.sin(a[..., 2])
    x = a[..., 0] + c * b[..., 0] - s * b[..., 1]
    y = a[..., 1] + s * b[..., 0] + c * b[..., 1]
    return np.stack([x, y, wrap_angle(a[..., 2] + b[..., 2])], axis=-1)


def inverse(p) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    c, s = np.cos(p[..., 2]), np.sin(p[..., 2])
    x = -(c * p[..., 0] + s * p[..., 1])
    y = -(-s * p[..., 0] + c * p[..., 1])
    return np.stack([x, y, wrap_angle(-p[..., 2])], axis=-1)


def between(a, b) -> np.ndarray:
    """Relative pose ``a^-1 (+) b``."""
    return compose(inverse(a), b)


def _v_coefficients(theta):
    """Return (sin t / t, (1 - cos t) / t) with a series branch near zero.

    The second uses ``2 sin^2(t/2) / t`` to avoid cancellation for small t.
    """
    theta = np.asarray(theta, dtype=float)
    small = np.abs(theta) < _SMALL_ANGLE
    safe = np.where(small, 1.0, theta)
    a = np.where(small, 1.0 - theta**2 / 6.0, np.sin(safe) / safe)
    b = np.where(small, theta / 2.0 - theta**3 / 24.0, 2.0 * np.sin(0.5 * safe) ** 2 / safe)
    return a, b


def exp_map(t) -> np.ndarray:
    """Map a tangent vector to a pose."""
    t = np.asarray(t, dtype=float)
    theta = t[..., 2]
    a, b = _v_coefficients(theta)
    x = a * t[..., 0] - b * t[..., 1]
    y = b * t[..., 0] + a * t[..., 1]
    return np.stack([x, y, wrap_angle(theta)], axis=-1)


def log_map(p) -> np.ndarray:
    """Inverse of :func:`exp_map` for poses with theta in (-pi, pi)."""
    p = np.asarray(p, dtype=float)
    theta = wrap_angle(p[..., 2])
    half = 0.5 * theta
    small = np.abs(theta) < _SMALL_ANGLE
    safe = np.where(small, 1.0, half)
    # (theta / 2) * cot(theta / 2)
    hc = np.where(small, 1.0 - theta**2 / 12.0, safe * np.cos(safe) / np.sin(safe))
    dx = hc * p[..., 0] + half * p[..., 1]
    dy = -half * p[..., 0] + hc * p[..., 1]
    return np.stack([dx, dy, theta], axis=-1)


def exp_jacobian_det(t):
    """Determinant of d exp_map / d t in (x, y, theta) coordinates.

    Equals ``2 (1 - cos theta) / theta^2``; the rotation row is decoupled so
    only the 2x2 translation block contributes.
    """
    a, b = _v_coefficients(np.asarray(t, dtype=float)[..., 2])
    return a * a + b * b


def range_to(p, l):
    """Euclidean distance from the translation part of ``p`` to point ``l``."""
    p = np.asarray(p, dtype=float)
    l = np.asarray(l, dtype=float)
    return np.hypot(l[..., 0] - p[..., 0], l[..., 1] - p[..., 1])


def transform_points(p, pts):
    """Apply pose ``p`` to points expressed in its local frame."""
    p = np.asarray(p, dtype=float)
    pts = np.asarray(pts, dtype=float)
    c, s = np.cos(p[..., 2]), np.sin(p[..., 2])
    return np.stack([p[..., 0] + c * pts[..., 0] - s * pts[..., 1],
                     p[..., 1] + s * pts[..., 0] + c * pts[..., 1]], axis=-1)
