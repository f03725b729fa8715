"""Twist profile, the twist coordinate map and its metric tensor.

The rotation angle is ``phi(x) = Phi * alpha(x)`` with
``alpha(x) = (erf(x / lam) + 1) / 2``. All profile functions accept complex
positions, which the complex-scaled operator needs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .model import WaveguideSpec

_SQRT_PI = np.sqrt(np.pi)


@dataclass(frozen=True)
class TwistProfile:
    Phi: float
    lam: float

    @classmethod
    def from_spec(cls, spec: WaveguideSpec) -> "TwistProfile":
        return cls(spec.Phi, spec.lam)

    def alpha(self, x):
        return 0.5 * (erf(np.asarray(x) / self.lam) + 1.0)

    def alpha_prime(self, x):
        x = np.asarray(x)
        return np.exp(-((x / self.lam) ** 2)) / (self.lam * _SQRT_PI)

    def alpha_second(self, x):
        x = np.asarray(x)
        return -2.0 * x / self.lam**2 * self.alpha_prime(x)


def twist_angle(x, profile: TwistProfile):
    return profile.Phi * profile.alpha(x)


def twist_rate(x, profile: TwistProfile):
    return profile.Phi * profile.alpha_prime(x)


def twist_curvature(x, profile: TwistProfile):
    """Second derivative of the rotation angle."""
    return profile.Phi * profile.alpha_second(x)


def map_point(x, y, z, profile: TwistProfile):
    """Image of a straight-wire point under the twist (rotation of the section by phi(x))."""
    phi = twist_angle(x, profile)
    c, s = np.cos(phi), np.sin(phi)
    x = np.asarray(x, dtype=float)
    return x + 0.0 * phi, y * c + z * s, z * c - y * s


@dataclass(frozen=True)
class MetricSample:
    """Metric of the twist map at one or many points.

    ``drift`` holds the first-derivative coefficients b^j = sum_i d_i G^{ij}
    of the expanded kinetic operator, so that the Laplacian in the straight
    coordinates reads ``G^{ij} d_i d_j + b^j d_j`` (det G = 1).
    Arrays carry the broadcast point shape in front of the tensor axes.
    """

    G: np.ndarray
    G_inv: np.ndarray
    sqrt_det: np.ndarray
    drift: np.ndarray


def metric_at(x, y, z, profile: TwistProfile) -> MetricSample:
    x, y, z = np.broadcast_arrays(*(np.asarray(v, dtype=float) for v in (x, y, z)))
    p1 = twist_rate(x, profile)
    p2 = twist_curvature(x, profile)
    one = np.ones_like(x)
    zero = np.zeros_like(x)

    G = np.stack(
        [
            np.stack([1 + p1**2 * (y**2 + z**2), p1 * z, -p1 * y], axis=-1),
            np.stack([p1 * z, one, zero], axis=-1),
            np.stack([-p1 * y, zero, one], axis=-1),
        ],
        axis=-2,
    )
    G_inv = np.stack(
        [
            np.stack([one, -p1 * z, p1 * y], axis=-1),
            np.stack([-p1 * z, 1 + p1**2 * z**2, -(p1**2) * y * z], axis=-1),
            np.stack([p1 * y, -(p1**2) * y * z, 1 + p1**2 * y**2], axis=-1),
        ],
        axis=-2,
    )
    drift = np.stack([zero, -p2 * z - p1**2 * y, p2 * y - p1**2 * z], axis=-1)
    sqrt_det = np.sqrt(np.linalg.det(G))
    return MetricSample(G, G_inv, sqrt_det, drift)


def jacobian_numeric(x, y, z, profile: TwistProfile, h: float = 1e-4) -> np.ndarray:
    """Central-difference Jacobian d r'_a / d x_i of :func:`map_point`, shape (3, 3)."""
    point = np.array([x, y, z], dtype=float)
    J = np.empty((3, 3))
    for i in range(3):
        step = np.zeros(3)
        step[i] = h
        plus = np.array(map_point(*(point + step), profile))
        minus = np.array(map_point(*(point - step), profile))
        J[:, i] = (plus - minus) / (2 * h)
    return J


def metric_numeric(x, y, z, profile: TwistProfile, h: float = 1e-4) -> np.ndarray:
    """G_ij = (d_i r') . (d_j r') built from the numeric Jacobian."""
    J = jacobian_numeric(x, y, z, profile, h)
    return J.T @ J


def drift_numeric(x, y, z, profile: TwistProfile, h: float = 1e-3) -> np.ndarray:
    """Drift from second derivatives of the map, b^j = -G^{kl} (d_kl r') . G^{ji} d_i r'."""
    point = np.array([x, y, z], dtype=float)
    J = jacobian_numeric(x, y, z, profile, h=1e-4)
    G_inv = np.linalg.inv(J.T @ J)

    def r(p):
        return np.array(map_point(*p, profile))

    hess = np.empty((3, 3, 3))  # hess[:, k, l] = d_k d_l r'
    for k in range(3):
        for l in range(3):
            ek = np.zeros(3)
            el = np.zeros(3)
            ek[k] = h
            el[l] = h
            hess[:, k, l] = (
                r(point + ek + el) - r(point + ek - el) - r(point - ek + el) + r(point - ek - el)
            ) / (4 * h * h)
    lap_r = np.einsum("kl,akl->a", G_inv, hess)
    return -G_inv @ (J.T @ lap_r)
