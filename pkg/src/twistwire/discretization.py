"""Finite-difference grid and assembly of the discrete Hamiltonian.

Both assembly routes produce the same symmetric divergence-form operator
``-c * sum_ij d_i (G^{ij} d_j) + V``: diagonal tensor components sit on cell
faces (compact 3-point differences), mixed components on cell edges with
4-point cross stencils. Unknowns are the interior nodes of the cross-section
(hard walls carry psi = 0) on every x-node; beyond the first and last x-node
the operator is closed by psi = 0, which the scattering code replaces with
lead boundary conditions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .geometry import TwistProfile, metric_at
from .model import WaveguideSpec, potential_value


@dataclass(frozen=True)
class Grid3D:
    N_x: int
    N_y: int
    N_z: int
    x_half: float
    L_y: float
    L_z: float

    @property
    def dx(self) -> float:
        return 2 * self.x_half / self.N_x

    @property
    def dy(self) -> float:
        return self.L_y / self.N_y

    @property
    def dz(self) -> float:
        return self.L_z / self.N_z

    @property
    def shape(self) -> tuple[int, int, int]:
        """Unknowns per axis: all x-nodes, interior y and z nodes."""
        return self.N_x + 1, self.N_y - 1, self.N_z - 1

    @property
    def slice_size(self) -> int:
        return (self.N_y - 1) * (self.N_z - 1)

    @property
    def size(self) -> int:
        return (self.N_x + 1) * self.slice_size

    @cached_property
    def x(self) -> np.ndarray:
        return -self.x_half + self.dx * np.arange(self.N_x + 1)

    @cached_property
    def y(self) -> np.ndarray:
        return -self.L_y / 2 + self.dy * np.arange(1, self.N_y)

    @cached_property
    def z(self) -> np.ndarray:
        return -self.L_z / 2 + self.dz * np.arange(1, self.N_z)

    def flat_index(self, i, j, k):
        """Flat index of x-node ``i`` and interior transverse nodes ``j``, ``k`` (0-based)."""
        ny, nz = self.N_y - 1, self.N_z - 1
        return (np.asarray(i) * ny + np.asarray(j)) * nz + np.asarray(k)

    def unravel(self, index):
        return np.unravel_index(index, self.shape)

    def slice_nodes(self):
        """Transverse coordinates of one slice, flattened in storage order."""
        Y, Z = np.meshgrid(self.y, self.z, indexing="ij")
        return Y.ravel(), Z.ravel()


def build_grid(spec: WaveguideSpec, resolution: float, x_resolution: float | None = None) -> Grid3D:
    """Uniform grid with spacings no larger than ``resolution``.

    Each spacing is snapped so the corresponding length is an integer
    multiple of it. ``x_resolution`` optionally sets the longitudinal target
    separately.
    """
    if not resolution > 0:
        raise ValueError(f"resolution must be positive, got {resolution!r}")
    x_res = resolution if x_resolution is None else x_resolution
    if not x_res > 0:
        raise ValueError(f"x_resolution must be positive, got {x_res!r}")

    def intervals(length, target):
        return max(1, math.ceil(length / target - 1e-9))

    N_y = intervals(spec.L_y, resolution)
    N_z = intervals(spec.L_z, resolution)
    if N_y < 10 or N_z < 10:
        raise ValueError(
            f"resolution {resolution} nm gives {N_y}x{N_z} transverse intervals; at least 10 per direction required"
        )
    N_x = intervals(2 * spec.x_half, x_res)
    return Grid3D(N_x, N_y, N_z, spec.x_half, spec.L_y, spec.L_z)


@dataclass(frozen=True)
class SparseOperator:
    """Assembled sparse matrix with symmetry bookkeeping."""

    matrix: sp.csr_matrix
    symmetric: bool
    hermitian: bool

    @classmethod
    def from_matrix(cls, matrix, tol: float = 1e-12) -> "SparseOperator":
        m = sp.csr_matrix(matrix)
        m.sum_duplicates()
        m.eliminate_zeros()
        scale = max(abs(m).max(), 1.0) if m.nnz else 1.0
        sym = _max_abs(m - m.T) <= tol * scale
        herm = _max_abs(m - m.conj().T) <= tol * scale
        return cls(m, bool(sym), bool(herm))

    @property
    def dimension(self) -> int:
        return self.matrix.shape[0]

    def triplets(self):
        coo = self.matrix.tocoo()
        return coo.row, coo.col, coo.data

    def hermiticity_defect(self) -> float:
        return _max_abs(self.matrix - self.matrix.conj().T)

    def dump(self, path) -> None:
        """Write ``row col re im`` lines (coordinate text format)."""
        rows, cols, vals = self.triplets()
        vals = np.asarray(vals, dtype=complex)
        with open(path, "w") as fh:
            fh.write(f"# dimension {self.dimension} nnz {len(vals)}\n")
            for r, c, v in zip(rows, cols, vals):
                fh.write(f"{r} {c} {v.real:.17g} {v.imag:.17g}\n")


def _max_abs(m) -> float:
    m = sp.csr_matrix(m)
    return float(abs(m).max()) if m.nnz else 0.0


# -- metric-form route: explicit stencil triplets, coefficients from the metric tensor


def _stencil(grid: Grid3D, axis: int, at: tuple):
    """Difference stencil of d/d(axis) at staggered locations.

    ``at`` gives, per axis, 'node' or 'half' placement. A derivative along a
    'half' axis is a two-point difference; a 'half' placement along another
    axis averages the two neighbouring nodes. Returns location coordinates
    (integer node offsets, halves as i + 0.5) and a list of (offsets, weight).
    """
    h = (grid.dx, grid.dy, grid.dz)[axis]
    terms = [((), 1.0)]
    for ax in range(3):
        if at[ax] == "half":
            if ax == axis:
                pairs = [(0, -1.0 / h), (1, 1.0 / h)]
            else:
                pairs = [(0, 0.5), (1, 0.5)]
        else:
            pairs = [(0, 1.0)]
        terms = [(off + (o,), w * pw) for off, w in terms for o, pw in pairs]
    return terms


def _locations(grid: Grid3D, at: tuple):
    """Integer base indices of all face/edge locations, in full-node numbering.

    Full-node numbering counts wall nodes: y-nodes 0..N_y, z-nodes 0..N_z,
    x-nodes -1..N_x+1 (the outer two are the closing zeros).
    """
    ranges = []
    ranges.append(np.arange(-1, grid.N_x + 1) if at[0] == "half" else np.arange(0, grid.N_x + 1))
    ranges.append(np.arange(0, grid.N_y) if at[1] == "half" else np.arange(1, grid.N_y))
    ranges.append(np.arange(0, grid.N_z) if at[2] == "half" else np.arange(1, grid.N_z))
    I, J, K = np.meshgrid(*ranges, indexing="ij")
    return I.ravel(), J.ravel(), K.ravel()


def _coords(grid: Grid3D, I, J, K, at):
    shift = [0.5 if a == "half" else 0.0 for a in at]
    x = -grid.x_half + grid.dx * (I + shift[0])
    y = -grid.L_y / 2 + grid.dy * (J + shift[1])
    z = -grid.L_z / 2 + grid.dz * (K + shift[2])
    return x, y, z


def _node_flat(grid: Grid3D, i, j, k):
    """Flat index of full-numbered nodes; -1 where the node carries psi = 0."""
    valid = (i >= 0) & (i <= grid.N_x) & (j >= 1) & (j <= grid.N_y - 1) & (k >= 1) & (k <= grid.N_z - 1)
    idx = grid.flat_index(i, j - 1, k - 1)
    return np.where(valid, idx, -1)


_PLACEMENT = {
    (0, 0): ("half", "node", "node"),
    (1, 1): ("node", "half", "node"),
    (2, 2): ("node", "node", "half"),
    (0, 1): ("half", "half", "node"),
    (0, 2): ("half", "node", "half"),
    (1, 2): ("node", "half", "half"),
}


def _tensor_triplets(grid: Grid3D, coefficient):
    """Triplets of sum_q B_q^T C_q B_q for a symmetric coefficient field.

    ``coefficient(a, b, x, y, z)`` returns component C^{ab} at the given points.
    """
    rows, cols, vals = [], [], []
    for (a, b), at in _PLACEMENT.items():
        I, J, K = _locations(grid, at)
        x, y, z = _coords(grid, I, J, K, at)
        coef = coefficient(a, b, x, y, z)
        sa = _stencil(grid, a, at)
        sb = _stencil(grid, b, at)
        for off_p, w_p in sa:
            p = _node_flat(grid, I + off_p[0], J + off_p[1], K + off_p[2])
            for off_q, w_q in sb:
                q = _node_flat(grid, I + off_q[0], J + off_q[1], K + off_q[2])
                keep = (p >= 0) & (q >= 0)
                v = coef[keep] * (w_p * w_q)
                rows.append(p[keep])
                cols.append(q[keep])
                vals.append(v)
                if a != b:
                    rows.append(q[keep])
                    cols.append(p[keep])
                    vals.append(v)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def assemble_metric_hamiltonian(grid: Grid3D, spec: WaveguideSpec) -> SparseOperator:
    """Lab-frame Hamiltonian in straight coordinates, coefficients from the metric tensor."""
    profile = TwistProfile.from_spec(spec)

    def coefficient(a, b, x, y, z):
        return metric_at(x, y, z, profile).G_inv[..., a, b]

    rows, cols, vals = _tensor_triplets(grid, coefficient)
    n = grid.size
    kinetic = sp.coo_matrix((spec.kinetic_scale * vals, (rows, cols)), shape=(n, n)).tocsr()
    V = np.repeat(potential_value(grid.x, spec), grid.slice_size)
    return SparseOperator.from_matrix(kinetic + sp.diags(V))


# -- twist-frame route: K_0 + U built from 1D difference/average operators


def _difference_1d(n_nodes: int, h: float) -> sp.csr_matrix:
    """(n + 1) faces x n nodes forward difference; face f sits between nodes f - 1 and f."""
    return sp.diags([np.ones(n_nodes), -np.ones(n_nodes)], [0, -1], shape=(n_nodes + 1, n_nodes)).tocsr() / h


def _average_1d(n_nodes: int) -> sp.csr_matrix:
    return 0.5 * sp.diags([np.ones(n_nodes), np.ones(n_nodes)], [0, -1], shape=(n_nodes + 1, n_nodes)).tocsr()


def _twistframe_matrix(grid: Grid3D, spec: WaveguideSpec, theta: complex = 0.0) -> sp.csr_matrix:
    """Discrete K(theta) = -d_yy - d_zz - [e^{-theta} d_x + eps a d_tau]^2 + V(e^theta x).

    ``a = alpha'(e^theta x)``; theta = 0 gives the unscaled twist-frame operator.
    """
    nx, ny, nz = grid.shape
    profile = TwistProfile.from_spec(spec)
    eps = spec.Phi
    scale = np.exp(theta)

    # face x node operators (faces include the walls / closing ends)
    Dx = _difference_1d(nx, grid.dx)
    Dy = _difference_1d(ny, grid.dy)
    Dz = _difference_1d(nz, grid.dz)
    Ax, Ay, Az = _average_1d(nx), _average_1d(ny), _average_1d(nz)
    Ix, Iy, Iz = (sp.identity(n, format="csr") for n in (nx, ny, nz))

    def kron3(a, b, c):
        return sp.kron(sp.kron(a, b, format="csr"), c, format="csr")

    x_node = grid.x
    x_face = np.concatenate([[grid.x[0] - grid.dx / 2], grid.x + grid.dx / 2])
    y_node, z_node = grid.y, grid.z
    y_face = -grid.L_y / 2 + grid.dy * (np.arange(grid.N_y) + 0.5)
    z_face = -grid.L_z / 2 + grid.dz * (np.arange(grid.N_z) + 0.5)

    a_node = eps * profile.alpha_prime(scale * x_node)
    a_face = eps * profile.alpha_prime(scale * x_face)

    def field(fx, fy, fz):
        return np.einsum("i,j,k->ijk", fx, fy, fz).ravel()

    def quad(B1, coef, B2):
        C = sp.diags(coef)
        if B2 is None:
            return B1.T @ C @ B1
        return B1.T @ C @ B2 + B2.T @ C @ B1

    # K_0 part
    Bx = kron3(Dx, Iy, Iz)
    By = kron3(Ix, Dy, Iz)
    Bz = kron3(Ix, Iy, Dz)
    K = quad(Bx, np.full(Bx.shape[0], np.exp(-2 * theta), dtype=complex), None)
    K = K + quad(By, np.ones(By.shape[0]), None) + quad(Bz, np.ones(Bz.shape[0]), None)

    # U part: -(d_x a d_tau + d_tau a d_x) e^{-theta} - a^2 d_tau^2 in divergence form
    # y-faces: a^2 z^2 ; z-faces: a^2 y^2
    K = K + quad(By, field(a_node**2, np.ones(ny + 1), z_node**2), None)
    K = K + quad(Bz, field(a_node**2, y_node**2, np.ones(nz + 1)), None)
    # xy-edges: -e^{-theta} a z ; xz-edges: e^{-theta} a y
    Bx_xy = kron3(Dx, Ay, Iz)
    By_xy = kron3(Ax, Dy, Iz)
    K = K + quad(Bx_xy, -np.exp(-theta) * field(a_face, np.ones(ny + 1), z_node), By_xy)
    Bx_xz = kron3(Dx, Iy, Az)
    Bz_xz = kron3(Ax, Iy, Dz)
    K = K + quad(Bx_xz, np.exp(-theta) * field(a_face, y_node, np.ones(nz + 1)), Bz_xz)
    # yz-edges: -a^2 y z
    By_yz = kron3(Ix, Dy, Az)
    Bz_yz = kron3(Ix, Ay, Dz)
    K = K + quad(By_yz, -field(a_node**2, y_face, z_face), Bz_yz)

    V = np.repeat(potential_value(scale * x_node, spec), grid.slice_size)
    return (spec.kinetic_scale * K + sp.diags(V)).tocsr()


def assemble_twistframe_hamiltonian(grid: Grid3D, spec: WaveguideSpec) -> SparseOperator:
    """Twist-frame Hamiltonian K_0 + U assembled from 1D operator algebra."""
    m = _twistframe_matrix(grid, spec, 0.0)
    if np.iscomplexobj(m) and not np.any(m.data.imag):
        m = m.real
    return SparseOperator.from_matrix(m)


def tau_derivative(grid: Grid3D) -> sp.csr_matrix:
    """Nodal d_tau = y d_z - z d_y on one cross-section (central differences, wall zeros)."""
    ny, nz = grid.N_y - 1, grid.N_z - 1
    cy = sp.diags([np.full(ny - 1, 0.5), np.full(ny - 1, -0.5)], [1, -1]) / grid.dy
    cz = sp.diags([np.full(nz - 1, 0.5), np.full(nz - 1, -0.5)], [1, -1]) / grid.dz
    Y, Z = grid.slice_nodes()
    dy = sp.kron(cy, sp.identity(nz))
    dz = sp.kron(sp.identity(ny), cz)
    return (sp.diags(Y) @ dz - sp.diags(Z) @ dy).tocsr()


def transverse_block(grid: Grid3D, spec: WaveguideSpec) -> sp.csr_matrix:
    """Straight cross-section operator -c (d_yy + d_zz) on one slice."""
    ny, nz = grid.N_y - 1, grid.N_z - 1
    ly = sp.diags([np.full(ny, 2.0), np.full(ny - 1, -1.0), np.full(ny - 1, -1.0)], [0, 1, -1]) / grid.dy**2
    lz = sp.diags([np.full(nz, 2.0), np.full(nz - 1, -1.0), np.full(nz - 1, -1.0)], [0, 1, -1]) / grid.dz**2
    return (spec.kinetic_scale * (sp.kron(ly, sp.identity(nz)) + sp.kron(sp.identity(ny), lz))).tocsr()
