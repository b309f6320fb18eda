"""Hexahedral FEM: element matrices, Nitsche boundary blocks, corotation and global assembly.

Element matrices use corner quadrature: the shape-function derivative table
evaluated at the eight cell corners only contains -1/h, 0 and 1/h, and the
quadrature weight of corner ``c`` is the volume weight ``w_v(e, c)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .grid import CORNER_OFFSETS, CORNER_SIGNS, SimulationGrid

POLAR_MAX_ITER = 20
POLAR_TOL = 1e-8


class MaterialError(ValueError):
    pass


def lame_from_young_poisson(k: float, nu: float) -> tuple[float, float]:
    """Standard isotropic 3D relations."""
    if not k > 0:
        raise MaterialError(f"Young's modulus must be positive, got {k}")
    if nu >= 0.5:
        raise MaterialError(f"Poisson ratio {nu} >= 0.5 is incompressible")
    if nu < 0:
        raise MaterialError(f"Poisson ratio must be non-negative, got {nu}")
    mu = k / (2.0 * (1.0 + nu))
    lam = k * nu / ((1.0 + nu) * (1.0 - 2.0 * nu))
    return mu, lam


def lame_derivatives(k: float, nu: float) -> np.ndarray:
    """Jacobian d(mu, lam)/d(k, nu) as a 2x2 array [[dmu/dk, dmu/dnu], [dlam/dk, dlam/dnu]]."""
    dmu_dk = 1.0 / (2.0 * (1.0 + nu))
    dmu_dnu = -k / (2.0 * (1.0 + nu) ** 2)
    den = (1.0 + nu) * (1.0 - 2.0 * nu)
    dlam_dk = nu / den
    # d/dnu [nu / ((1+nu)(1-2nu))] = (1 + 2 nu^2) / den^2
    dlam_dnu = k * (1.0 + 2.0 * nu * nu) / den ** 2
    return np.array([[dmu_dk, dmu_dnu], [dlam_dk, dlam_dnu]])


def corner_derivatives(h: float) -> np.ndarray:
    """G[c, i, a] = dN_i/dx_a evaluated at corner c; entries are -1/h, 0 or 1/h."""
    G = np.zeros((8, 8, 3))
    for c in range(8):
        vc = CORNER_OFFSETS[c]
        for i in range(8):
            vi = CORNER_OFFSETS[i]
            for a in range(3):
                val = 1.0 / h if vi[a] == 1 else -1.0 / h
                for b in range(3):
                    if b != a and vi[b] != vc[b]:
                        val = 0.0
                G[c, i, a] = val
    return G


def corner_stiffness_parts(h: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-corner 24x24 stiffness contributions for unit mu and unit lambda (before weighting)."""
    G = corner_derivatives(h)
    eye = np.eye(3)
    # K_mu[c, i, a, j, b] = delta_ab grad N_i . grad N_j + dN_i/dx_b dN_j/dx_a
    dot = np.einsum("cid,cjd->cij", G, G)
    k_mu = np.einsum("cij,ab->ciajb", dot, eye) + np.einsum("cib,cja->ciajb", G, G)
    k_lam = np.einsum("cia,cjb->ciajb", G, G)
    return k_mu.reshape(8, 24, 24), k_lam.reshape(8, 24, 24)


def element_stiffness(mu: float, lam: float, w_v, h: float) -> np.ndarray:
    """24x24 element stiffness, corner quadrature weighted by the volume weights."""
    w_v = np.asarray(w_v, dtype=float).reshape(8)
    k_mu, k_lam = corner_stiffness_parts(h)
    return np.einsum("c,cij->ij", w_v, mu * k_mu + lam * k_lam)


def element_mass(m: float, w_v) -> np.ndarray:
    """Diagonal 24x24 mass matrix; corner quadrature makes N_i N_j diagonal."""
    w_v = np.asarray(w_v, dtype=float).reshape(8)
    return np.diag(np.repeat(m * w_v, 3))


def nitsche_parts(w_b, n, h: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nitsche increments for unit mu, unit lambda and unit penalty (each 24x24)."""
    w_b = np.asarray(w_b, dtype=float).reshape(8)
    n = np.asarray(n, dtype=float).reshape(3)
    G = corner_derivatives(h)
    eye = np.eye(3)
    # traction of the basis field N_j e_b at corner c: KD[j, c, a, b]
    gn = np.einsum("cjd,d->jc", G.transpose(0, 1, 2), n)  # (grad N_j . n) at corner c, indexed [j, c]
    Gjc = G.transpose(1, 0, 2)  # [j, c, a]
    kd_mu = np.einsum("jca,b->jcab", Gjc, n) + np.einsum("jc,ab->jcab", gn, eye)
    kd_lam = np.einsum("a,jcb->jcab", n, Gjc)

    def consistency(kd):
        # block (i, j) -= w_b(i) KD[j, i] + w_b(j) KD[i, j]^T
        blocks = -(
            w_b[:, None, None, None] * kd.transpose(1, 0, 2, 3)
            + w_b[None, :, None, None] * kd.transpose(0, 1, 3, 2)
        )
        return blocks.transpose(0, 2, 1, 3).reshape(24, 24)

    pen = np.diag(np.repeat(w_b, 3))
    return consistency(kd_mu), consistency(kd_lam), pen


def nitsche_dirichlet_terms(mu, lam, w_b, n, eta, h: float = 1.0, u_d=None):
    """Matrix and right-hand-side increments of a Nitsche Dirichlet cell.

    ``u_d`` are the prescribed corner displacements (8, 3); zero by default.
    """
    if not eta > 0:
        raise MaterialError(f"Nitsche penalty must be positive, got {eta}")
    n_mu, n_lam, n_pen = nitsche_parts(w_b, n, h)
    dK = mu * n_mu + lam * n_lam + eta * n_pen
    if u_d is None:
        return dK, np.zeros(24)
    u_d = np.asarray(u_d, dtype=float).reshape(24)
    # only the symmetrizing and penalty terms carry (u - u_D)
    w_b = np.asarray(w_b, dtype=float).reshape(8)
    G = corner_derivatives(h)
    n = np.asarray(n, float)
    rhs = np.zeros((8, 3))
    ud = u_d.reshape(8, 3)
    for i in range(8):
        for j in range(8):
            # traction of the basis field N_i e_b at corner j
            kd_ij = mu * (np.outer(G[j, i], n) + np.eye(3) * (G[j, i] @ n)) + lam * np.outer(n, G[j, i])
            rhs[i] -= w_b[j] * kd_ij.T @ ud[j]
        rhs[i] += eta * w_b[i] * ud[i]
    return dK, rhs.reshape(24)


# --- corotation ---------------------------------------------------------------


def deformation_gradient(u_corners, h: float) -> np.ndarray:
    """Average deformation gradient of cell(s) from corner displacements (..., 8, 3)."""
    u = np.asarray(u_corners, dtype=float)
    return np.eye(3) + np.einsum("...ia,ib->...ab", u, CORNER_SIGNS) / (4.0 * h)


def polar_iterates(F: np.ndarray, max_iter: int = POLAR_MAX_ITER, tol: float = POLAR_TOL):
    """Newton polar iteration X <- (X + X^-T)/2 on a batch (E, 3, 3).

    Returns the list of iterates ``[X_0 = F, X_1, ..., X_n]``.
    """
    X = np.array(F, dtype=float)
    its = [X]
    for _ in range(max_iter):
        Xn = 0.5 * (X + np.linalg.inv(X).transpose(0, 2, 1))
        its.append(Xn)
        done = np.max(np.abs(Xn - X)) < tol
        X = Xn
        if done:
            break
    return its


@dataclass
class ElementRotation:
    R: np.ndarray  # (E, 3, 3)
    degenerate: np.ndarray  # (E,) bool, det(F) <= 0 -> previous rotation reused
    iterations: int


def compute_corotation(u_corners, h: float, previous: Optional[np.ndarray] = None) -> ElementRotation:
    """Rotational part of the average deformation gradient of each cell."""
    u = np.asarray(u_corners, dtype=float)
    single = u.ndim == 2
    u = u.reshape(-1, 8, 3)
    F = deformation_gradient(u, h)
    det = np.linalg.det(F)
    bad = ~(det > 0)
    Fs = F.copy()
    Fs[bad] = np.eye(3)
    its = polar_iterates(Fs)
    R = its[-1]
    if np.any(bad):
        prev = np.broadcast_to(np.eye(3), R.shape) if previous is None else np.asarray(previous).reshape(-1, 3, 3)
        R[bad] = prev[bad]
    if single:
        return ElementRotation(R[0], bad, len(its) - 1)
    return ElementRotation(R, bad, len(its) - 1)


def polar_adjoint(its: list, R_bar: np.ndarray) -> np.ndarray:
    """Reverse sweep through recorded polar iterates: dJ/dR -> dJ/dF."""
    X_bar = R_bar
    for X in reversed(its[:-1]):
        XiT = np.swapaxes(np.linalg.inv(X), -1, -2)
        X_bar = 0.5 * (X_bar - XiT @ np.swapaxes(X_bar, -1, -2) @ XiT)
    return X_bar


def batch_matvec(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    """(E, n, m) times (E, m) -> (E, n)."""
    return (A @ x[..., None])[..., 0]


# --- blocked sparse storage ----------------------------------------------------


class BlockedSparseMatrix:
    """Block CSR matrix with dense 3x3 blocks on a fixed sparsity pattern."""

    def __init__(self, indptr: np.ndarray, indices: np.ndarray, n_block_rows: int, data=None):
        self.indptr = np.asarray(indptr, dtype=np.int64)
        self.indices = np.asarray(indices, dtype=np.int64)
        self.n = int(n_block_rows)
        self.data = np.zeros((len(self.indices), 3, 3)) if data is None else np.asarray(data, float)
        rows = np.repeat(np.arange(self.n), np.diff(self.indptr))
        self.rows = rows
        self.diag = np.full(self.n, -1, dtype=np.int64)
        on_diag = rows == self.indices
        self.diag[rows[on_diag]] = np.nonzero(on_diag)[0]
        self._scipy = None

    @classmethod
    def from_pairs(cls, rows: np.ndarray, cols: np.ndarray, n: int) -> "BlockedSparseMatrix":
        key = np.unique(np.asarray(rows, np.int64) * n + np.asarray(cols, np.int64))
        r, c = key // n, key % n
        indptr = np.zeros(n + 1, dtype=np.int64)
        np.add.at(indptr, r + 1, 1)
        return cls(np.cumsum(indptr), c, n)

    def like(self, data=None) -> "BlockedSparseMatrix":
        out = BlockedSparseMatrix.__new__(BlockedSparseMatrix)
        out.indptr, out.indices, out.n, out.rows, out.diag = self.indptr, self.indices, self.n, self.rows, self.diag
        out.data = np.zeros_like(self.data) if data is None else data
        out._scipy = None
        return out

    def block_index(self, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
        """Position of block (row, col) in ``data``; the block must exist in the pattern."""
        rows = np.asarray(rows, np.int64)
        cols = np.asarray(cols, np.int64)
        key = self.rows * self.n + self.indices  # sorted
        pos = np.searchsorted(key, rows * self.n + cols)
        if np.any(pos >= len(key)) or np.any(key[np.minimum(pos, len(key) - 1)] != rows * self.n + cols):
            raise KeyError("block outside the sparsity pattern")
        return pos

    @property
    def shape(self) -> tuple[int, int]:
        return (3 * self.n, 3 * self.n)

    def to_scipy(self) -> sp.bsr_matrix:
        if self._scipy is None:
            self._scipy = sp.bsr_matrix((self.data, self.indices, self.indptr), shape=self.shape)
        return self._scipy

    def invalidate(self) -> None:
        self._scipy = None

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def matvec(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return (self.to_scipy() @ x.reshape(-1)).reshape(x.shape)

    def __matmul__(self, x):
        return self.matvec(x)

    def diagonal_blocks(self) -> np.ndarray:
        return self.data[self.diag]

    def transpose(self) -> "BlockedSparseMatrix":
        """Transpose; assumes a structurally symmetric pattern, as every FEM matrix here has."""
        key_t = self.indices * self.n + self.rows
        order = np.argsort(key_t, kind="stable")
        return self.like(self.data[order].transpose(0, 2, 1).copy())

    def asymmetry(self) -> float:
        """max |A - A^T| over all entries."""
        return float(np.max(np.abs(self.data - self.transpose().data))) if len(self.data) else 0.0

    def scaled_add(self, a: float, other: "BlockedSparseMatrix", b: float = 1.0) -> "BlockedSparseMatrix":
        return self.like(a * self.data + b * other.data)

    def write_coo(self, path) -> None:
        """Coordinate-triplet text dump (row col value), zero-based scalar indices."""
        coo = self.to_scipy().tocoo()
        with open(path, "w") as fh:
            fh.write(f"% {coo.shape[0]} {coo.shape[1]} {coo.nnz}\n")
            for r, c, v in zip(coo.row, coo.col, coo.data):
                fh.write(f"{r} {c} {float(v)!r}\n")


def lumped_mass(grid: SimulationGrid, m: float) -> np.ndarray:
    """Per-node mass (N,) from the diagonal corner-quadrature mass matrix."""
    return m * grid.node_volumes()


class Assembler:
    """Precomputed per-grid data to assemble the corotated global stiffness matrix fast.

    The element matrices for unit mu and unit lambda are formed once per grid from a
    single reference element weighted by the volume weights of each cell.
    """

    def __init__(self, grid: SimulationGrid):
        self.grid = grid
        h = grid.h
        k_mu, k_lam = corner_stiffness_parts(h)
        self.k_mu_ref = k_mu
        self.k_lam_ref = k_lam
        self.Ke_mu = np.einsum("ec,cij->eij", grid.w_v, k_mu)
        self.Ke_lam = np.einsum("ec,cij->eij", grid.w_v, k_lam)
        cn = grid.cell_nodes
        rows = np.repeat(cn, 8, axis=1).ravel()
        cols = np.tile(cn, (1, 8)).ravel()
        self.pattern = BlockedSparseMatrix.from_pairs(rows, cols, grid.n_nodes)
        self.scatter = self.pattern.block_index(rows, cols).reshape(-1, 8, 8)
        # local rest corner positions relative to corner 0
        self.x_local = (h * CORNER_OFFSETS).astype(float)  # (8, 3)

        nb = self.pattern.data.shape[0]
        self.nitsche_mu = np.zeros((nb, 3, 3))
        self.nitsche_lam = np.zeros((nb, 3, 3))
        self.nitsche_pen = np.zeros((nb, 3, 3))
        for k in np.nonzero(grid.dirichlet)[0]:
            e = grid.boundary_cells[k]
            n_mu, n_lam, n_pen = nitsche_parts(grid.w_b[k], grid.normals[k], h)
            idx = self.scatter[e]
            for part, target in ((n_mu, self.nitsche_mu), (n_lam, self.nitsche_lam), (n_pen, self.nitsche_pen)):
                blocks = part.reshape(8, 3, 8, 3).transpose(0, 2, 1, 3)
                np.add.at(target, idx, blocks)
        self.has_dirichlet = bool(np.any(grid.dirichlet))

    def _scatter_blocks(self, blocks: np.ndarray) -> np.ndarray:
        """Sum per-element blocks (E, 8, 8, 3, 3) into pattern data (nnzb, 3, 3)."""
        nb = self.pattern.data.shape[0]
        idx = (self.scatter[..., None] * 9 + np.arange(9)).ravel()
        out = np.bincount(idx, weights=blocks.reshape(-1), minlength=nb * 9)
        return out.reshape(nb, 3, 3)

    def element_matrices(self, mu: float, lam: float) -> np.ndarray:
        return mu * self.Ke_mu + lam * self.Ke_lam

    def rotate(self, Ke: np.ndarray, R: Optional[np.ndarray]) -> np.ndarray:
        """T K T^T with T = diag(R, ..., R) for each element; returns (E, 8, 3, 8, 3)."""
        E = Ke.shape[0]
        if R is None:
            return Ke.reshape(E, 8, 3, 8, 3)
        left = R[:, None] @ Ke.reshape(E, 8, 3, 24)
        out = left.reshape(E, 24, 8, 3) @ R.transpose(0, 2, 1)[:, None]
        return out.reshape(E, 8, 3, 8, 3)

    def rotation_force(self, Ke: np.ndarray, R: Optional[np.ndarray]) -> np.ndarray:
        """Per-element constant force T K (x - T^T x) moved to the right-hand side, (E, 8, 3)."""
        if R is None:
            return np.zeros((Ke.shape[0], 8, 3))
        x = self.x_local
        rx = x - x @ R  # rows: x_i - R^T x_i
        kx = batch_matvec(Ke, rx.reshape(-1, 24)).reshape(-1, 8, 3)
        return kx @ R.transpose(0, 2, 1)

    def assemble(self, mu: float, lam: float, eta: float, R: Optional[np.ndarray] = None):
        """Global stiffness (BlockedSparseMatrix) and the corotational force (N, 3)."""
        Ke = self.element_matrices(mu, lam)
        K5 = self.rotate(Ke, R)
        data = self._scatter_blocks(K5.transpose(0, 1, 3, 2, 4))
        if self.has_dirichlet:
            data += mu * self.nitsche_mu + lam * self.nitsche_lam + eta * self.nitsche_pen
        f_rot_e = self.rotation_force(Ke, R)
        f_rot = np.zeros((self.grid.n_nodes, 3))
        for a in range(3):
            f_rot[:, a] = np.bincount(
                self.grid.cell_nodes.ravel(), weights=f_rot_e[..., a].ravel(), minlength=self.grid.n_nodes
            )
        return self.pattern.like(data), f_rot

    def gather(self, v: np.ndarray) -> np.ndarray:
        """Node field (N, 3) -> per-element corner values (E, 8, 3)."""
        return v[self.grid.cell_nodes]

    def scatter_nodes(self, ve: np.ndarray) -> np.ndarray:
        out = np.zeros((self.grid.n_nodes, 3))
        for a in range(3):
            out[:, a] = np.bincount(self.grid.cell_nodes.ravel(), weights=ve[..., a].ravel(), minlength=self.grid.n_nodes)
        return out


def gravity_force(grid: SimulationGrid, m: float, g) -> np.ndarray:
    """Body force m g integrated with the volume weights, per node (N, 3)."""
    return np.outer(grid.node_volumes() * m, np.asarray(g, dtype=float))


def assemble_global(
    grid: SimulationGrid,
    params,
    u_prev: np.ndarray,
    corotation: bool = True,
    eta: float = 1e8,
    assembler: Optional[Assembler] = None,
):
    """Global corotated stiffness and force vector (gravity + corotational offset).

    ``params`` needs ``youngs_modulus``, ``poisson_ratio``, ``mass_density`` and ``gravity``.
    """
    u_prev = np.asarray(u_prev, dtype=float)
    if u_prev.shape != (grid.n_nodes, 3):
        raise ValueError(f"displacement has shape {u_prev.shape}, expected {(grid.n_nodes, 3)}")
    asm = assembler or Assembler(grid)
    mu, lam = lame_from_young_poisson(params.youngs_modulus, params.poisson_ratio)
    R = compute_corotation(asm.gather(u_prev), grid.h).R if corotation else None
    K, f_rot = asm.assemble(mu, lam, eta, R)
    f = gravity_force(grid, params.mass_density, params.gravity) + f_rot
    return K, f
