"""Physical parameters and closed-form reference quantities of the straight wire.

Energies are in meV and lengths in nm throughout the package.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, replace
from typing import NamedTuple

import numpy as np

# hbar^2 / (2 m_e) = 3.80998 eV A^2
HBAR2_OVER_2ME = 38.0998  # meV nm^2
HBAR = 0.658212  # meV ps


@dataclass(frozen=True)
class WaveguideSpec:
    """Geometry, material and well parameters of the twisted wire.

    Parameters
    ----------
    L_y, L_z : float
        Sides of the rectangular cross-section (nm). Must differ.
    mass_ratio : float
        Effective mass in units of the free electron mass.
    nu : float
        Strength of the longitudinal well (dimensionless, >= 0).
    L_p : float
        Length scale of the well (nm).
    Phi : float
        Total twist angle (rad).
    lam : float
        Twist length scale (nm); the twist is effective over about ``4 * lam``.
    x_half : float
        Half-length of the computational domain (nm).
    """

    L_y: float = 20.0
    L_z: float = 10.0
    mass_ratio: float = 0.067
    nu: float = 2.95
    L_p: float = 10.0
    Phi: float = 0.0
    lam: float = 17.5
    x_half: float = 100.0

    def __post_init__(self):
        for name in ("L_y", "L_z", "mass_ratio", "L_p", "lam", "x_half"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value > 0):
                raise ValueError(f"{name} must be positive, got {value!r}")
        if math.isclose(self.L_y, self.L_z):
            raise ValueError("square cross-section not supported: L_y must differ from L_z")
        if not (np.isfinite(self.nu) and self.nu >= 0):
            raise ValueError(f"nu must be >= 0, got {self.nu!r}")
        if not (np.isfinite(self.Phi) and self.Phi >= 0):
            raise ValueError(f"Phi must be >= 0, got {self.Phi!r}")
        min_half = 2 * self.lam + 3 * self.L_p
        if self.x_half < min_half:
            raise ValueError(
                f"x_half={self.x_half} nm too short: twist and well need x_half >= {min_half} nm"
            )

    @property
    def kinetic_scale(self) -> float:
        """hbar^2 / (2 m) in meV nm^2."""
        return HBAR2_OVER_2ME / self.mass_ratio

    def with_(self, **changes) -> "WaveguideSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


class Threshold(NamedTuple):
    n: int
    n_y: int
    n_z: int
    energy: float


class BoundLevel(NamedTuple):
    j: int
    energy: float


class CombinedLevel(NamedTuple):
    n: int
    j: int
    energy: float
    in_window: bool


@dataclass(frozen=True)
class LevelTable:
    """Subband thresholds, well levels and their sums for the straight wire.

    ``thresholds`` covers every subband that contributes a combined level
    below the requested maximum, so it can extend above ``E_max``.
    ``in_window`` flags combined levels inside the one-channel window [E_1, E_2].
    """

    thresholds: list[Threshold]
    bound: list[BoundLevel]
    combined: list[CombinedLevel]
    E_max: float

    def threshold(self, n: int) -> float:
        return self.thresholds[n - 1].energy

    def level(self, n: int, j: int) -> float:
        for lev in self.combined:
            if lev.n == n and lev.j == j:
                return lev.energy
        raise KeyError((n, j))

    def in_window(self) -> list[CombinedLevel]:
        return [lev for lev in self.combined if lev.in_window]


def _check_quantum_number(value, name):
    if isinstance(value, bool) or int(value) != value or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")


def subband_energy(n_y: int, n_z: int, spec: WaveguideSpec) -> float:
    _check_quantum_number(n_y, "n_y")
    _check_quantum_number(n_z, "n_z")
    return spec.kinetic_scale * ((n_y * np.pi / spec.L_y) ** 2 + (n_z * np.pi / spec.L_z) ** 2)


def potential_value(x, spec: WaveguideSpec):
    """Longitudinal well V(x); accepts real or complex positions."""
    depth = spec.kinetic_scale * spec.nu * (spec.nu + 1) / spec.L_p**2
    return depth * (np.tanh(np.asarray(x) / spec.L_p) ** 2 - 1)


def bound_levels(spec: WaveguideSpec) -> list[float]:
    if spec.nu <= 0:
        return []
    scale = spec.kinetic_scale / spec.L_p**2
    count = math.ceil(spec.nu)
    return [-scale * (spec.nu + 1 - j) ** 2 for j in range(1, count + 1)]


def subband_thresholds(spec: WaveguideSpec, E_max: float) -> list[Threshold]:
    """All subband thresholds up to ``E_max``, ordered by energy."""
    c = spec.kinetic_scale
    ny_max = int(spec.L_y / np.pi * math.sqrt(max(E_max, 0.0) / c)) + 1
    nz_max = int(spec.L_z / np.pi * math.sqrt(max(E_max, 0.0) / c)) + 1
    pairs = []
    for n_y in range(1, ny_max + 1):
        for n_z in range(1, nz_max + 1):
            e = subband_energy(n_y, n_z, spec)
            if e <= E_max:
                pairs.append((e, n_y, n_z))
    pairs.sort()
    return [Threshold(n + 1, ny, nz, e) for n, (e, ny, nz) in enumerate(pairs)]


def level_table(spec: WaveguideSpec, E_max: float) -> LevelTable:
    E1 = subband_energy(1, 1, spec)
    if E_max <= E1:
        raise ValueError(f"E_max={E_max} must lie above the first threshold {E1:.3f} meV")
    mus = bound_levels(spec)
    depth = -mus[0] if mus else 0.0
    thresholds = subband_thresholds(spec, E_max + depth)
    E2 = thresholds[1].energy if len(thresholds) > 1 else subband_thresholds(spec, 10 * E_max)[1].energy
    combined = []
    for th in thresholds:
        for j, mu in enumerate(mus, start=1):
            eps = th.energy + mu
            if eps <= E_max:
                combined.append(CombinedLevel(th.n, j, eps, bool(E1 <= eps <= E2)))
    combined.sort(key=lambda lev: (lev.energy, lev.n, lev.j))
    bound = [BoundLevel(j, mu) for j, mu in enumerate(mus, start=1)]
    return LevelTable(thresholds, bound, combined, float(E_max))


def _segment_matrices(k, h):
    # (psi, psi') propagator across a segment of constant wavenumber k
    kh = k * h
    cos = np.cos(kh)
    sin_over_k = h * np.sinc(kh / np.pi)
    m = np.empty(k.shape + (2, 2), dtype=complex)
    m[..., 0, 0] = cos
    m[..., 0, 1] = sin_over_k
    m[..., 1, 0] = -k * np.sin(kh)
    m[..., 1, 1] = cos
    return m


def _ordered_product(mats):
    # mats[0] acts first; pairwise tree reduction keeps the operation count low
    while len(mats) > 1:
        if len(mats) % 2:
            tail = mats[-1:]
            mats = mats[:-1]
        else:
            tail = None
        mats = np.matmul(mats[1::2], mats[0::2])
        if tail is not None:
            mats = np.concatenate([mats, tail])
    return mats[0]


def reference_transmission_1d(E_kin: float, spec: WaveguideSpec, step: float = 0.05) -> float:
    """|t|^2 of the straight wire's longitudinal problem at kinetic energy ``E_kin``.

    Piecewise-constant transfer matrices with midpoint-sampled V on
    [-x_half, x_half]; V is taken as zero outside. Uses no 3D machinery.
    """
    if not E_kin > 0:
        raise ValueError(f"kinetic energy must be positive, got {E_kin!r}")
    if step > 0.05:
        raise ValueError("step must not exceed 0.05 nm")
    c = spec.kinetic_scale
    n_seg = int(math.ceil(2 * spec.x_half / step))
    h = 2 * spec.x_half / n_seg
    mid = -spec.x_half + h * (np.arange(n_seg) + 0.5)
    k_loc = np.sqrt((E_kin - potential_value(mid, spec)).astype(complex) / c)
    M = _ordered_product(_segment_matrices(k_loc, h))
    k = math.sqrt(E_kin / c)
    # left: e^{ikx} + r e^{-ikx}; right: t e^{ikx}  (local origins at each end)
    # [t, ik t] = M [1 + r, ik (1 - r)]
    a = M[0, 0] + 1j * k * M[0, 1]
    b = M[0, 0] - 1j * k * M[0, 1]
    cc = M[1, 0] + 1j * k * M[1, 1]
    d = M[1, 0] - 1j * k * M[1, 1]
    # t = a + b r ; ik t = cc + d r
    r = (cc - 1j * k * a) / (1j * k * b - d)
    t = a + b * r
    return float(abs(t) ** 2)
