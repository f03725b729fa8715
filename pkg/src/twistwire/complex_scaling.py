"""Complex-scaled Hamiltonian and its resonance eigenvalues.

The longitudinal coordinate is dilated globally, x -> e^theta x. Resonances
become isolated eigenvalues ``E_r - i Gamma / 2`` that do not move with
theta, while each channel continuum rotates onto ``E_n + e^{-2 i Im theta} R+``.
The discrete operator is the twist-frame assembly with the scaled
coefficients, so at theta = 0 it is the unscaled Hamiltonian exactly.
"""

from __future__ import annotations

import cmath
import itertools
import logging
import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .discretization import Grid3D, SparseOperator, _twistframe_matrix
from .linalg import ConvergenceError, SingularMatrixError, shift_invert_eigs
from .model import WaveguideSpec, level_table, subband_energy
from .scattering import _profile, _transverse_levels

logger = logging.getLogger(__name__)

MAX_IM_THETA = 0.5
DEFAULT_SHIFT = 0.01  # meV below the real axis
BRANCH_CLEARANCE = 0.05  # rad


@dataclass(frozen=True)
class ScaledOperatorSpec:
    """Scaling parameter plus the problem it applies to.

    ``allow_zero`` admits theta = 0 (the unscaled operator), which is useful
    for checks but cannot expose resonances.
    """

    theta: complex
    grid: Grid3D
    spec: WaveguideSpec
    allow_zero: bool = False

    def __post_init__(self):
        check_theta(self.theta, self.allow_zero)


def check_theta(theta, allow_zero: bool = False) -> complex:
    theta = complex(theta)
    if not (np.isfinite(theta.real) and np.isfinite(theta.imag)):
        raise ValueError(f"theta must be finite, got {theta!r}")
    if theta.imag > MAX_IM_THETA:
        raise ValueError(f"Im theta = {theta.imag} exceeds the admissible cap {MAX_IM_THETA}")
    if theta.imag < 0 or (theta.imag == 0 and not allow_zero):
        raise ValueError(f"Im theta must be > 0, got {theta.imag}")
    return theta


@dataclass(frozen=True)
class ComplexResonance:
    """Eigenvalue of the scaled operator; ``Gamma`` = -2 Im(value)."""

    value: complex
    residual: float
    label: tuple[int, int] | None
    theta: complex

    @property
    def E_r(self) -> float:
        return self.value.real

    @property
    def Gamma(self) -> float:
        return -2.0 * self.value.imag


def assemble_scaled_operator(grid: Grid3D, spec: WaveguideSpec, theta, allow_zero: bool = False) -> SparseOperator:
    """Discrete K(theta) = K_0(theta) + U(theta) on the full grid (hard walls at +-x_half)."""
    theta = check_theta(theta, allow_zero)
    return SparseOperator.from_matrix(_twistframe_matrix(grid, spec, theta))


def transverse_basis(grid: Grid3D, spec: WaveguideSpec, n_modes: int):
    """Lowest ``n_modes`` discrete transverse modes: (slice x n_modes matrix, [(E_h, n_y, n_z)])."""
    levels = _transverse_levels(grid, spec, n_modes)
    X = np.column_stack([_profile(grid, n_y, n_z) for _, n_y, n_z in levels])
    return X, levels


def project_mode_space(op: SparseOperator, grid: Grid3D, basis: np.ndarray) -> SparseOperator:
    """Galerkin projection onto span{e_i (x) chi_m}; exact when the operator maps that span into itself."""
    Q = sp.kron(sp.identity(grid.shape[0], format="csr"), sp.csr_matrix(basis), format="csr")
    reduced = (Q.T @ op.matrix @ Q).tocsr()
    reduced.data[np.abs(reduced.data) < 1e-13 * abs(reduced).max()] = 0.0
    return SparseOperator.from_matrix(reduced)


def assemble_mode_space_operator(grid: Grid3D, spec: WaveguideSpec, theta, n_modes: int, allow_zero: bool = False) -> SparseOperator:
    """Scaled operator reduced to the lowest ``n_modes`` transverse channels."""
    X, _ = transverse_basis(grid, spec, n_modes)
    return project_mode_space(assemble_scaled_operator(grid, spec, theta, allow_zero), grid, X)


def on_continuum_branch(value: complex, thresholds, theta, clearance: float = BRANCH_CLEARANCE) -> bool:
    """True if ``value`` lies within ``clearance`` rad of a rotated half-line E_n + e^{-2 i Im theta} R+."""
    rot = -2.0 * complex(theta).imag
    for E_n in thresholds:
        d = value - E_n
        if abs(d) < 1e-9:
            return True
        gap = abs((cmath.phase(d) - rot + math.pi) % (2 * math.pi) - math.pi)
        if gap <= clearance:
            return True
    return False


def nearest_label(value: complex, spec: WaveguideSpec):
    """(n, j) of the straight-wire level closest to Re(value)."""
    E_max = max(value.real, subband_energy(1, 1, spec)) + 50.0
    table = level_table(spec, E_max)
    if not table.combined:
        return None
    best = min(table.combined, key=lambda lev: abs(lev.energy - value.real))
    return (best.n, best.j)


def locate_resonances(
    K: SparseOperator,
    window,
    seeds,
    *,
    thresholds,
    theta,
    labels=None,
    k: int = 4,
    shift: float = DEFAULT_SHIFT,
    tol: float = 1e-8,
    dedup: float = 1e-6,
):
    """Eigenvalues of ``K`` near each seed, minus rotated-continuum ones.

    Parameters
    ----------
    window : (E_lo, E_hi)
        Real-part range to keep (meV).
    seeds : sequence of float
        Target energies; the Arnoldi shift is ``seed - i * shift``.
    thresholds : sequence of float
        Channel thresholds whose rotated half-lines are filtered out.
    labels : sequence of (n, j), optional
        Label attached to the eigenvalue nearest each seed.

    Returns
    -------
    found : list of ComplexResonance
        Sorted by real part.
    unmatched : list of float
        Seeds for which no admissible eigenvalue was found.
    """
    lo, hi = window
    if lo >= hi:
        raise ValueError(f"empty window {window}")
    seeds = list(seeds)
    labels = list(labels) if labels is not None else [None] * len(seeds)
    found: list[ComplexResonance] = []
    unmatched = []
    for seed, label in zip(seeds, labels):
        try:
            pairs = shift_invert_eigs(K, complex(seed, -shift), k=k, tol=tol)
        except (ConvergenceError, SingularMatrixError) as exc:
            logger.warning("eigensolve at seed %.6f failed: %s", seed, exc)
            unmatched.append(seed)
            continue
        keep = [
            (lam, v)
            for lam, v in pairs
            if lo <= lam.real <= hi and not on_continuum_branch(lam, thresholds, theta)
        ]
        if not keep:
            unmatched.append(seed)
            continue
        keep.sort(key=lambda p: abs(p[0] - seed))
        for rank, (lam, v) in enumerate(keep):
            if any(abs(lam - f.value) < dedup * max(1.0, abs(lam)) for f in found):
                continue
            res = float(np.linalg.norm(K.matrix @ v - lam * v) / np.linalg.norm(v))
            found.append(ComplexResonance(lam, res, label if rank == 0 else None, complex(theta)))
    found.sort(key=lambda r: r.value.real)
    return found, unmatched


def lattice_channel_thresholds(grid: Grid3D, spec: WaveguideSpec, E_max: float) -> list[float]:
    out = []
    for e, _, _ in _transverse_levels(grid, spec, grid.slice_size):
        if e > E_max:
            break
        out.append(e)
    return out


def scaled_resonances(
    grid: Grid3D,
    spec: WaveguideSpec,
    theta,
    seeds,
    window,
    *,
    labels=None,
    n_modes: int | None = None,
    k: int = 4,
):
    """Assemble K(theta) (optionally in mode space) and locate eigenvalues near ``seeds``."""
    if n_modes is None:
        K = assemble_scaled_operator(grid, spec, theta)
    else:
        K = assemble_mode_space_operator(grid, spec, theta, n_modes)
    thresholds = lattice_channel_thresholds(grid, spec, window[1] + 1.0)
    return locate_resonances(K, window, seeds, thresholds=thresholds, theta=theta, labels=labels, k=k)


def _nearest(found, target):
    if not found:
        return None
    return min(found, key=lambda r: abs(r.value - target))


def extrapolated_resonances(
    grid: Grid3D,
    spec: WaveguideSpec,
    theta,
    seeds,
    window,
    *,
    labels=None,
    n_modes: int | None = None,
    k: int = 4,
    every: bool = False,
):
    """Eigenvalues near ``seeds`` extrapolated to dx -> 0.

    The dilated x-derivative is the only complex-valued discretization error,
    and it is O(dx^2); the eigenvalue is computed on ``grid`` and on the same
    grid with dx halved, then Richardson-extrapolated. Resonances come back
    in seed order; seeds without a match on both grids are returned unmatched.
    With ``every``, all admissible fine-grid eigenvalues are extrapolated and
    returned by real part; only the one nearest each seed carries its label.
    """
    seeds = list(seeds)
    labels = list(labels) if labels is not None else [None] * len(seeds)
    fine = Grid3D(2 * grid.N_x, grid.N_y, grid.N_z, grid.x_half, grid.L_y, grid.L_z)
    coarse_found, _ = scaled_resonances(grid, spec, theta, seeds, window, n_modes=n_modes, k=k)
    fine_found, _ = scaled_resonances(fine, spec, theta, seeds, window, n_modes=n_modes, k=k)
    out, unmatched = [], []
    if every:
        if not fine_found:
            return [], seeds
        owner = {id(_nearest(fine_found, seed)): label for seed, label in zip(seeds, labels)}
        for a in fine_found:
            b = _nearest(coarse_found, a.value)
            if b is None or abs(b.value - a.value) > 0.5:
                continue
            value = richardson(b.value, a.value)
            out.append(ComplexResonance(complex(value), max(a.residual, b.residual), owner.get(id(a)), complex(theta)))
        return out, []
    for seed, label in zip(seeds, labels):
        a = _nearest(fine_found, seed)
        b = _nearest(coarse_found, a.value) if a is not None else None
        if a is None or b is None:
            unmatched.append(seed)
            continue
        value = richardson(b.value, a.value)
        out.append(ComplexResonance(complex(value), max(a.residual, b.residual), label, complex(theta)))
    return out, unmatched


def theta_stability(
    grid: Grid3D,
    spec: WaveguideSpec,
    seed: float,
    theta_list,
    *,
    window=None,
    n_modes: int | None = None,
    extrapolate: bool = False,
):
    """Maximum pairwise drift (meV) of the eigenvalue nearest ``seed`` across ``theta_list``.

    Returns ``(drift, values)``. With ``extrapolate`` each value is the
    dx -> 0 extrapolation of :func:`extrapolated_resonances`. Raises
    ``LookupError`` if the eigenvalue is lost at some theta.
    """
    theta_list = [check_theta(t) for t in theta_list]
    if len(theta_list) < 2:
        raise ValueError("theta_stability needs at least two theta values")
    window = window or (seed - 5.0, seed + 5.0)
    values = []
    for theta in theta_list:
        if extrapolate:
            found, _ = extrapolated_resonances(grid, spec, theta, [seed], window, n_modes=n_modes)
        else:
            found, _ = scaled_resonances(grid, spec, theta, [seed], window, n_modes=n_modes)
        if not found:
            raise LookupError(f"eigenvalue near {seed} meV lost at theta={theta}")
        values.append(_nearest(found, seed).value)
    drift = max(abs(a - b) for a, b in itertools.combinations(values, 2))
    return float(drift), values


def richardson(coarse: complex, fine: complex, ratio: float = 2.0, order: int = 2) -> complex:
    """Extrapolate two grid results with spacing ratio ``ratio`` for an error of the given order."""
    f = ratio**order
    return (f * fine - coarse) / (f - 1.0)
