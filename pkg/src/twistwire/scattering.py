"""Open-boundary scattering solve on the finite-difference lattice.

The first and last x-slices of the grid are the lead planes. Outside them the
wire is straight and the well has died out, so the lattice solution is a sum
of lead modes ``chi_m lambda_m^j`` with ``lambda_m = exp(i k_m dx)``. Writing
the neighbour slice beyond each end through that expansion closes the linear
system: the boundary rows pick up ``-t_x sum_m lambda_m chi_m chi_m^T`` and
the incoming mode a source term on the injection side.

Leads use the lattice dispersion ``cos(k dx) = 1 - (E - E_m^h) / (2 t_x)``
with the discrete transverse thresholds ``E_m^h``, which keeps the straight
wire exactly reflectionless on the lattice.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .discretization import Grid3D, SparseOperator
from .linalg import SingularMatrixError, block_end_response, sparse_factor
from .model import WaveguideSpec, subband_energy

logger = logging.getLogger(__name__)

DEFAULT_EXTRA_MODES = 8


@dataclass(frozen=True)
class LeadMode:
    """One transverse channel of the straight lead.

    ``k`` is the lattice wavenumber (1/nm): real and positive for open modes,
    ``i * kappa`` for closed ones. ``lam = exp(i k dx)`` is the slice-to-slice
    factor of the outgoing (or decaying) solution.
    """

    n: int
    n_y: int
    n_z: int
    threshold: float
    lattice_threshold: float
    profile: np.ndarray = field(repr=False)
    k: complex
    lam: complex
    is_open: bool

    @property
    def kappa(self) -> float:
        return 0.0 if self.is_open else float(self.k.imag)


@dataclass(frozen=True)
class LeadModeSet:
    energy: float
    modes: list[LeadMode]
    dx: float
    t_x: float

    @property
    def n_open(self) -> int:
        return sum(m.is_open for m in self.modes)

    @property
    def open_modes(self) -> list[LeadMode]:
        return [m for m in self.modes if m.is_open]

    def profiles(self) -> np.ndarray:
        """Slice-size x M matrix of mode profiles."""
        return np.column_stack([m.profile for m in self.modes])

    def lams(self) -> np.ndarray:
        return np.array([m.lam for m in self.modes])

    def velocity(self, m: int) -> float:
        """Lattice group velocity factor sin(k dx) of mode index ``m`` (0 if closed)."""
        mode = self.modes[m]
        return math.sin(mode.k.real * self.dx) if mode.is_open else 0.0


def _transverse_levels(grid: Grid3D, spec: WaveguideSpec, count: int):
    """Lowest ``count`` discrete transverse eigenpairs as (E_h, n_y, n_z)."""
    c = spec.kinetic_scale
    ny_max, nz_max = grid.N_y - 1, grid.N_z - 1
    ey = 4 * c / grid.dy**2 * np.sin(np.arange(1, ny_max + 1) * np.pi / (2 * grid.N_y)) ** 2
    ez = 4 * c / grid.dz**2 * np.sin(np.arange(1, nz_max + 1) * np.pi / (2 * grid.N_z)) ** 2
    total = ey[:, None] + ez[None, :]
    order = np.argsort(total, axis=None, kind="stable")[:count]
    iy, iz = np.unravel_index(order, total.shape)
    return [(float(total[a, b]), int(a) + 1, int(b) + 1) for a, b in zip(iy, iz)]


def lattice_thresholds(grid: Grid3D, spec: WaveguideSpec, count: int) -> list[float]:
    """Channel thresholds of the discrete lead (meV), lowest first."""
    return [e for e, _, _ in _transverse_levels(grid, spec, count)]


def _profile(grid: Grid3D, n_y: int, n_z: int) -> np.ndarray:
    jy = np.arange(1, grid.N_y)
    jz = np.arange(1, grid.N_z)
    py = np.sin(n_y * np.pi * jy / grid.N_y) * math.sqrt(2.0 / grid.N_y)
    pz = np.sin(n_z * np.pi * jz / grid.N_z) * math.sqrt(2.0 / grid.N_z)
    return np.kron(py, pz)


def _lead_factor(E: float, E_h: float, t_x: float):
    """(lam, is_open) for one channel from the lattice dispersion."""
    beta = 1.0 - (E - E_h) / (2.0 * t_x)
    if -1.0 < beta < 1.0:
        return complex(beta, math.sqrt(1.0 - beta * beta)), True
    if beta >= 1.0:
        return complex(beta - math.sqrt(beta * beta - 1.0)), False
    # above the lattice band: decaying with alternating sign
    return complex(beta + math.sqrt(beta * beta - 1.0)), False


def lead_modes(E: float, spec: WaveguideSpec, grid: Grid3D, M: int | None = None) -> LeadModeSet:
    """The ``M`` lowest lead channels at energy ``E``.

    ``M=None`` takes the open channels plus ``DEFAULT_EXTRA_MODES`` closed ones.
    A channel exactly at its threshold (k = 0) counts as closed.
    """
    t_x = spec.kinetic_scale / grid.dx**2
    max_modes = grid.slice_size
    levels = _transverse_levels(grid, spec, max_modes)
    n_open = sum(E > e_h for e_h, _, _ in levels)
    if M is None:
        M = min(n_open + DEFAULT_EXTRA_MODES, max_modes)
    if M < n_open:
        raise ValueError(f"M={M} is smaller than the {n_open} open channels at E={E} meV")
    if M > max_modes:
        raise ValueError(f"M={M} exceeds the {max_modes} transverse modes of the grid")
    modes = []
    for n, (e_h, n_y, n_z) in enumerate(levels[:M], start=1):
        lam, is_open = _lead_factor(E, e_h, t_x)
        k = -1j * np.log(lam) / grid.dx
        if not is_open:
            k = complex(0.0, abs(k.imag))
        modes.append(
            LeadMode(n, n_y, n_z, subband_energy(n_y, n_z, spec), e_h, _profile(grid, n_y, n_z), complex(k), lam, is_open)
        )
    return LeadModeSet(float(E), modes, grid.dx, t_x)


@dataclass(frozen=True)
class ScatteringSolution:
    """Amplitudes and probabilities for one incoming channel at one energy.

    ``t`` holds amplitudes into the outgoing-side lead modes, ``r`` into the
    injection-side lead modes, both referred to plane waves with origin at
    x = 0. Closed-mode amplitudes are the local values at the lead planes.
    ``T`` and ``R`` are current-normalized and zero for closed modes.
    """

    energy: float
    n_in: int
    side: str
    t: np.ndarray
    r: np.ndarray
    T: np.ndarray
    R: np.ndarray
    open_mask: np.ndarray
    modes: LeadModeSet = field(repr=False)
    wavefunction: np.ndarray | None = field(default=None, repr=False)

    @property
    def theta(self) -> np.ndarray:
        """Transmission phases arg(t_mn) in rad."""
        return np.angle(self.t)

    @property
    def total(self) -> float:
        return float(np.sum(self.T[self.open_mask]) + np.sum(self.R[self.open_mask]))


def unitarity_defect(sol: ScatteringSolution) -> float:
    return abs(1.0 - sol.total)


def _boundary_block(modes: LeadModeSet) -> np.ndarray:
    X = modes.profiles()
    return -modes.t_x * (X * modes.lams()) @ X.T


def _closed_system(H: SparseOperator, grid: Grid3D, E: float, sigma: np.ndarray) -> sp.csc_matrix:
    w = grid.slice_size
    n = H.dimension
    idx = np.arange(w)
    rows = np.concatenate([np.repeat(idx, w), np.repeat(idx, w) + n - w])
    cols = np.concatenate([np.tile(idx, w), np.tile(idx, w) + n - w])
    vals = np.concatenate([sigma.ravel(), sigma.ravel()])
    S = sp.coo_matrix((vals, (rows, cols)), shape=(n, n))
    return (H.matrix.astype(complex) - E * sp.identity(n, format="csr") + S).tocsc()


def _sweep_solve(A: sp.csr_matrix, grid: Grid3D, source: np.ndarray, project: np.ndarray, side: str):
    """(psi on the injection slice, projected psi on the far slice) by block elimination."""
    w = grid.slice_size
    nb = grid.shape[0]
    if side == "left":
        order = np.arange(nb)
    else:
        order = np.arange(nb)[::-1]

    def block(i):
        s = order[i] * w
        return A[s : s + w, s : s + w].toarray()

    def coupling(i):
        a, b = order[i] * w, order[i + 1] * w
        return A[a : a + w, b : b + w], A[b : b + w, a : a + w]

    return block_end_response(block, coupling, nb, source, project)


def _pick_solver(solver: str, keep_wavefunction: bool) -> str:
    # the block sweep beats a global LU already at 1 nm; only the direct
    # solve keeps the interior wavefunction
    if solver == "auto":
        return "direct" if keep_wavefunction else "sweep"
    if solver not in ("direct", "sweep"):
        raise ValueError(f"unknown solver {solver!r}")
    return solver


def solve_channels(
    H: SparseOperator,
    grid: Grid3D,
    spec: WaveguideSpec,
    E: float,
    channels,
    *,
    M: int | None = None,
    side: str = "left",
    solver: str = "auto",
    keep_wavefunction: bool = False,
) -> list[ScatteringSolution]:
    """Scattering solutions for several incoming channels sharing one factorization."""
    if side not in ("left", "right"):
        raise ValueError(f"side must be 'left' or 'right', got {side!r}")
    if H.dimension != grid.size:
        raise ValueError(f"operator dimension {H.dimension} does not match grid size {grid.size}")
    modes = lead_modes(E, spec, grid, M)
    channels = list(channels)
    for n_in in channels:
        if not 1 <= n_in <= len(modes.modes) or not modes.modes[n_in - 1].is_open:
            raise ValueError(f"E={E} meV is not above the threshold of incoming channel {n_in}")
    sigma = _boundary_block(modes)
    A = _closed_system(H, grid, E, sigma)
    X = modes.profiles()
    lams = modes.lams()
    w = grid.slice_size
    n = grid.size
    inj = slice(0, w) if side == "left" else slice(n - w, n)
    far = slice(n - w, n) if side == "left" else slice(0, w)

    sources = np.zeros((w, len(channels)), dtype=complex)
    for col, n_in in enumerate(channels):
        lam = lams[n_in - 1]
        sources[:, col] = modes.t_x * (1.0 / lam - lam) * X[:, n_in - 1]

    method = _pick_solver(solver, keep_wavefunction)
    psi_full = None
    if method == "direct":
        fact = sparse_factor(A)
        rhs = np.zeros((n, len(channels)), dtype=complex)
        rhs[inj] = sources
        psi_full = fact.solve(rhs)
        psi_inj = psi_full[inj]
        proj_far = X.T @ psi_full[far]
    else:
        if keep_wavefunction:
            raise ValueError("the sweep solver does not keep the interior wavefunction")
        psi_inj, proj_far = _sweep_solve(A.tocsr(), grid, sources, X.T, side)
    if not np.all(np.isfinite(psi_inj)):
        raise SingularMatrixError(f"non-finite solution at E={E} meV")

    open_mask = np.array([m.is_open for m in modes.modes])
    k = np.array([m.k.real if m.is_open else 0.0 for m in modes.modes])
    vel = np.array([modes.velocity(i) for i in range(len(modes.modes))])
    out = []
    for col, n_in in enumerate(channels):
        r_loc = X.T @ psi_inj[:, col]
        r_loc[n_in - 1] -= 1.0
        t_loc = proj_far[:, col]
        # refer open amplitudes to plane waves with origin at x = 0
        shift = np.where(open_mask, np.exp(-1j * (k + k[n_in - 1]) * grid.x_half), 1.0)
        t = t_loc * shift
        r = r_loc * shift
        ratio = np.where(open_mask, vel / vel[n_in - 1], 0.0)
        T = ratio * np.abs(t) ** 2
        R = ratio * np.abs(r) ** 2
        wf = psi_full[:, col].reshape(grid.shape) if keep_wavefunction and psi_full is not None else None
        out.append(ScatteringSolution(float(E), n_in, side, t, r, T, R, open_mask, modes, wf))
    return out


def solve_scattering(
    H: SparseOperator,
    grid: Grid3D,
    spec: WaveguideSpec,
    E: float,
    n_in: int = 1,
    **kwargs,
) -> ScatteringSolution:
    """Scattering solution for incoming channel ``n_in`` at energy ``E`` (meV).

    Keyword options: ``M`` (lead modes kept), ``side`` ('left' injects from
    x = -x_half), ``solver`` ('direct', 'sweep' or 'auto') and
    ``keep_wavefunction``.
    """
    return solve_channels(H, grid, spec, E, [n_in], **kwargs)[0]


def lead_residual(spec: WaveguideSpec) -> dict:
    """Twist rate and well depth at the lead planes relative to their peaks."""
    from .geometry import TwistProfile, twist_rate
    from .model import potential_value

    profile = TwistProfile.from_spec(spec)
    out = {}
    if spec.Phi > 0:
        out["twist_rate"] = float(twist_rate(spec.x_half, profile) / twist_rate(0.0, profile))
    else:
        out["twist_rate"] = 0.0
    v0 = potential_value(0.0, spec)
    out["potential"] = float(potential_value(spec.x_half, spec) / v0) if v0 != 0 else 0.0
    return out
