"""Time integration: theta-Newmark with Rayleigh damping, penalty ground collisions and corotation."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import (
    Assembler,
    BlockedSparseMatrix,
    compute_corotation,
    gravity_force,
    lame_from_young_poisson,
)
from .grid import GridError, SimulationGrid, read_grid_file, trilinear_weights, write_grid_file
from .params import GroundPlane, ParameterError, ParameterSet


class SolverError(RuntimeError):
    def __init__(self, message: str, residual: float = float("nan")):
        super().__init__(message)
        self.residual = residual


@dataclass
class SimulationConfig:
    dt: float = 0.01
    steps: int = 40
    theta: float = 0.6
    eta: float = 1e8  # Nitsche penalty
    corotation: bool = True
    solver: str = "cg"  # "cg" or "direct"
    cg_tol: float = 1e-10
    cg_max_iter: Optional[int] = None  # default 10 * DOFs

    def validate(self) -> None:
        if not 0.5 <= self.theta < 1.0:
            raise ParameterError(f"theta must lie in [0.5, 1), got {self.theta}")
        if not self.dt > 0:
            raise ParameterError(f"time step must be positive, got {self.dt}")
        if self.steps < 1:
            raise ParameterError(f"need at least one step, got {self.steps}")
        if not self.eta > 0:
            raise ParameterError(f"Nitsche penalty must be positive, got {self.eta}")
        if self.solver not in ("cg", "direct"):
            raise ParameterError(f"unknown solver {self.solver!r}")


@dataclass
class SimState:
    u: np.ndarray  # (N, 3)
    u_dot: np.ndarray  # (N, 3)
    t: int = 0


# --- linear algebra -------------------------------------------------------------


def _block_jacobi(A: BlockedSparseMatrix):
    inv = np.linalg.inv(A.diagonal_blocks())
    return lambda r: (inv @ r.reshape(-1, 3, 1)).reshape(r.shape)


def solve_linear(A, b, tol: float = 1e-10, max_iter: Optional[int] = None, x0=None) -> np.ndarray:
    """Preconditioned conjugate gradients; block-Jacobi for blocked matrices, Jacobi otherwise.

    Stops when ||b - A x|| <= tol * ||b||.
    """
    b = np.asarray(b, dtype=float)
    shape = b.shape
    bf = b.reshape(-1)
    if isinstance(A, BlockedSparseMatrix):
        op = A.to_scipy()
        precond = _block_jacobi(A)
    else:
        op = A
        d = A.diagonal() if sp.issparse(A) else np.diag(np.asarray(A))
        precond = lambda r: r / d  # noqa: E731
    n = bf.size
    max_iter = 10 * n if max_iter is None else max_iter
    bnorm = np.linalg.norm(bf)
    if bnorm == 0.0:
        return np.zeros(shape)
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float).reshape(-1)
    r = bf - op @ x
    z = precond(r)
    p = z.copy()
    rz = r @ z
    res = np.linalg.norm(r)
    for _ in range(max_iter + 1):
        if res <= tol * bnorm:
            return x.reshape(shape)
        Ap = op @ p
        alpha = rz / (p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        res = np.linalg.norm(r)
        z = precond(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    raise SolverError(f"CG did not converge: relative residual {res / bnorm:.3e} after {max_iter} iterations", res / bnorm)


def direct_solve(A, b) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    M = A.to_scipy() if isinstance(A, BlockedSparseMatrix) else A
    x = spla.spsolve(sp.csc_matrix(M), b.reshape(-1))
    if not np.all(np.isfinite(x)):
        raise SolverError("direct solve produced non-finite values")
    return x.reshape(b.shape)


def rayleigh_damping(M, K, alpha1: float, alpha2: float):
    """D = alpha1 M + alpha2 K. ``M`` may be a lumped diagonal (N,) array or a matrix."""
    if alpha1 < 0 or alpha2 < 0:
        raise ParameterError("damping coefficients must be non-negative")
    if isinstance(K, BlockedSparseMatrix):
        data = alpha2 * K.data
        if isinstance(M, BlockedSparseMatrix):
            data = data + alpha1 * M.data
        else:
            data = data.copy()
            data[K.diag] += alpha1 * np.asarray(M)[:, None, None] * np.eye(3)
        return K.like(data)
    Md = np.diag(np.repeat(M, 3)) if np.ndim(M) == 1 else M
    return alpha1 * Md + alpha2 * K


def newmark_matrix(K: BlockedSparseMatrix, node_mass: np.ndarray, c_mass: float, c_stiff: float):
    """c_mass * M + c_stiff * K with lumped M."""
    data = c_stiff * K.data
    data[K.diag] += (c_mass * node_mass)[:, None, None] * np.eye(3)
    return K.like(data)


def newmark_step(state: SimState, M, D, K, f_prev, f_cur, theta: float, dt: float, solver: str = "cg", tol: float = 1e-10):
    """One theta-Newmark step on generic matrices (dense, scipy or blocked).

    ``M`` may be a lumped (N,) mass array. Forces are blended as theta f_cur + (1 - theta) f_prev.
    """
    if not 0.5 <= theta < 1.0:
        raise ParameterError(f"theta must lie in [0.5, 1), got {theta}")
    u0 = np.asarray(state.u, dtype=float)
    v0 = np.asarray(state.u_dot, dtype=float)
    shape = u0.shape

    def mul(X, x):
        if np.ndim(X) == 1 and not sp.issparse(X):
            return (np.repeat(X, 3) if X.size * 3 == x.size else X) * x
        return X.matvec(x) if isinstance(X, BlockedSparseMatrix) else np.asarray(X @ x)

    def dense(X):
        if isinstance(X, BlockedSparseMatrix):
            return X.to_scipy()
        if np.ndim(X) == 1:
            d = np.repeat(X, 3) if 3 * X.size == u0.size else X
            return sp.diags(d)
        return X

    uf, vf = u0.reshape(-1), v0.reshape(-1)
    f = theta * np.asarray(f_cur, float).reshape(-1) + (1 - theta) * np.asarray(f_prev, float).reshape(-1)
    c = 1.0 / (theta * dt)
    rhs = c * mul(M, uf) + mul(D, uf) - (1 - theta) * dt * mul(K, uf) + mul(M, vf) / theta + dt * f
    A = c * dense(M) + dense(D) + theta * dt * dense(K)
    if sp.issparse(A):
        A = A.tocsr()
        u = solve_linear(A, rhs, tol) if solver == "cg" else spla.spsolve(A.tocsc(), rhs)
    else:
        A = np.asarray(A)
        u = solve_linear(A, rhs, tol) if solver == "cg" else np.linalg.solve(A, rhs)
    v = (u - uf) * c - (1 - theta) / theta * vf
    return SimState(u.reshape(shape), v.reshape(shape), state.t + 1)


# --- collisions -----------------------------------------------------------------


def softmin0(d, alpha: float):
    """softmin_alpha(0, d) = -log(1 + exp(-alpha d)) / alpha."""
    return -np.logaddexp(0.0, -alpha * np.asarray(d, dtype=float)) / alpha


def softmin0_derivatives(d, alpha: float):
    """First and second derivatives of softmin0 in d."""
    s = 0.5 * (1.0 + np.tanh(-0.5 * alpha * np.asarray(d, dtype=float)))  # sigmoid(-alpha d)
    return s, -alpha * s * (1.0 - s)


def plane_distance(x, plane: GroundPlane) -> np.ndarray:
    """Signed distance to the plane, negative below it."""
    return np.asarray(x, dtype=float) @ plane.normal() - plane.height * plane.normal()[2]


def collision_force(x_world, plane: GroundPlane) -> np.ndarray:
    """Penalty force (per unit area) at world position(s) x."""
    n = plane.normal()
    d = plane_distance(x_world, plane)
    return -plane.stiffness * softmin0(d, plane.softness)[..., None] * n


def extrapolate_collision_force(f_prev, dfdt_prev, dt: float) -> np.ndarray:
    return np.asarray(f_prev, dtype=float) + dt * np.asarray(dfdt_prev, dtype=float)


@dataclass
class CollisionSites:
    """Surface quadrature sites (boundary patch centroids) and how they map to grid nodes."""

    rest: np.ndarray  # (B, 3)
    nodes: np.ndarray  # (B, 8)
    interp: np.ndarray  # (B, 8) trilinear weights of the centroid
    w_b: np.ndarray  # (B, 8)

    @classmethod
    def from_grid(cls, grid: SimulationGrid) -> "CollisionSites":
        rest, cells = grid.surface_sites()
        return cls(rest, grid.cell_nodes[cells], trilinear_weights(grid.patch_centroids), grid.w_b)

    def positions(self, u: np.ndarray) -> np.ndarray:
        return self.rest + np.einsum("bc,bca->ba", self.interp, u[self.nodes])

    def velocities(self, v: np.ndarray) -> np.ndarray:
        return np.einsum("bc,bca->ba", self.interp, v[self.nodes])

    def distribute(self, traction: np.ndarray, n_nodes: int) -> np.ndarray:
        """Site tractions (B, 3) -> node forces (N, 3) weighted by boundary weights."""
        vals = self.w_b[:, :, None] * traction[:, None, :]
        out = np.zeros((n_nodes, 3))
        for a in range(3):
            out[:, a] = np.bincount(self.nodes.ravel(), weights=vals[..., a].ravel(), minlength=n_nodes)
        return out

    def gather(self, node_field: np.ndarray) -> np.ndarray:
        """Adjoint of ``distribute``: node field (N, 3) -> per-site (B, 3)."""
        return np.einsum("bc,bca->ba", self.w_b, node_field[self.nodes])

    def gather_interp(self, site_field: np.ndarray, n_nodes: int) -> np.ndarray:
        """Adjoint of ``positions``/``velocities``: per-site (B, 3) -> node field (N, 3)."""
        vals = self.interp[:, :, None] * site_field[:, None, :]
        out = np.zeros((n_nodes, 3))
        for a in range(3):
            out[:, a] = np.bincount(self.nodes.ravel(), weights=vals[..., a].ravel(), minlength=n_nodes)
        return out


# --- forward simulation -----------------------------------------------------------


@dataclass
class TrajectoryRecord:
    u: np.ndarray  # (T+1, N, 3), u[0] is the initial state
    u_dot: np.ndarray  # (T+1, N, 3)
    rotations: Optional[np.ndarray]  # (T, E, 3, 3), rotations used in step t -> t+1
    degenerate: Optional[np.ndarray]  # (T, E) bool
    forces: Optional[np.ndarray]  # (T, N, 3) time-blended force used in each step
    collision_forces: Optional[np.ndarray]  # (T, B, 3) site tractions at the start of each step
    collision_rates: Optional[np.ndarray]  # (T, B, 3) their time derivatives
    site_distances: np.ndarray  # (T+1, B) signed plane distance of the collision sites
    config: SimulationConfig = field(default_factory=SimulationConfig)

    @property
    def steps(self) -> int:
        return self.u.shape[0] - 1

    def state(self, t: int) -> SimState:
        return SimState(self.u[t], self.u_dot[t], t)


def initial_velocity(grid: SimulationGrid, params: ParameterSet) -> np.ndarray:
    """v0 + w0 x (x' - c) per node, c the volume-weighted centroid of the rest shape."""
    x = grid.rest_positions
    vol = grid.node_volumes()
    c = vol @ x / vol.sum()
    return np.asarray(params.initial_velocity) + np.cross(np.asarray(params.initial_angular_velocity), x - c)


class Simulator:
    """Per-grid cached data plus the forward time loop."""

    def __init__(self, grid: SimulationGrid, config: SimulationConfig | None = None):
        self.grid = grid
        self.config = config or SimulationConfig()
        self.config.validate()
        self.assembler = Assembler(grid)
        self.sites = CollisionSites.from_grid(grid)

    # pieces shared with the adjoint pass
    def rotations(self, u: np.ndarray, previous: Optional[np.ndarray]):
        if not self.config.corotation:
            return None, None
        rot = compute_corotation(self.assembler.gather(u), self.grid.h, previous)
        return rot.R, rot.degenerate

    def stiffness(self, params: ParameterSet, R):
        mu, lam = lame_from_young_poisson(params.youngs_modulus, params.poisson_ratio)
        return self.assembler.assemble(mu, lam, self.config.eta, R)

    def collision(self, u, v, params: ParameterSet):
        """Site tractions, their time derivatives and signed distances."""
        plane = params.ground
        n = plane.normal()
        d = plane_distance(self.sites.positions(u), plane)
        if not params.collisions:
            z = np.zeros((len(d), 3))
            return z, z.copy(), d
        s = softmin0(d, plane.softness)
        ds, _ = softmin0_derivatives(d, plane.softness)
        rate = self.sites.velocities(v) @ n
        f = -plane.stiffness * s[:, None] * n
        dfdt = -plane.stiffness * (ds * rate)[:, None] * n
        return f, dfdt, d

    def solve(self, A: BlockedSparseMatrix, b: np.ndarray, tol: Optional[float] = None) -> np.ndarray:
        cfg = self.config
        if cfg.solver == "direct":
            return direct_solve(A, b)
        return solve_linear(A, b, cfg.cg_tol if tol is None else tol, cfg.cg_max_iter)

    def run(self, params: ParameterSet, steps: Optional[int] = None, record: bool = True) -> TrajectoryRecord:
        params.validate()
        cfg = self.config
        T = cfg.steps if steps is None else steps
        if T < 1:
            raise ParameterError("need at least one step")
        grid = self.grid
        N = grid.n_nodes
        theta, dt = cfg.theta, cfg.dt
        node_mass = params.mass_density * grid.node_volumes()
        f_grav = gravity_force(grid, params.mass_density, params.gravity)
        a1, a2 = params.damping_mass, params.damping_stiffness
        c = 1.0 / (theta * dt)

        us = np.zeros((T + 1, N, 3))
        vs = np.zeros((T + 1, N, 3))
        vs[0] = initial_velocity(grid, params)
        B = len(self.sites.rest)
        dists = np.zeros((T + 1, B))
        if record:
            Rs = np.zeros((T, grid.n_cells, 3, 3)) if cfg.corotation else None
            degs = np.zeros((T, grid.n_cells), bool) if cfg.corotation else None
            forces = np.zeros((T, N, 3))
            fcs = np.zeros((T, B, 3))
            dfcs = np.zeros((T, B, 3))
        R = None
        for t in range(T):
            u0, v0 = us[t], vs[t]
            R, deg = self.rotations(u0, R)
            K, f_rot = self.stiffness(params, R)
            fc, dfc, d = self.collision(u0, v0, params)
            dists[t] = d
            f = f_grav + f_rot + self.sites.distribute(fc + theta * dt * dfc, N)
            Ku = K.matvec(u0)
            rhs = (c + a1) * node_mass[:, None] * u0 + (a2 - (1 - theta) * dt) * Ku + node_mass[:, None] * v0 / theta + dt * f
            A = newmark_matrix(K, node_mass, c + a1, a2 + theta * dt)
            u1 = self.solve(A, rhs)
            if not np.all(np.isfinite(u1)):
                raise SolverError(f"non-finite displacement at step {t}")
            us[t + 1] = u1
            vs[t + 1] = (u1 - u0) * c - (1 - theta) / theta * v0
            if record:
                if R is not None:
                    Rs[t] = R
                    degs[t] = deg
                forces[t] = f
                fcs[t], dfcs[t] = fc, dfc
        dists[T] = plane_distance(self.sites.positions(us[T]), params.ground)
        if not record:
            return TrajectoryRecord(us, vs, None, None, None, None, None, dists, cfg)
        return TrajectoryRecord(us, vs, Rs, degs, forces, fcs, dfcs, dists, cfg)


def simulate_forward(
    grid: SimulationGrid,
    params: ParameterSet,
    T: int,
    record: bool = True,
    config: SimulationConfig | None = None,
) -> TrajectoryRecord:
    cfg = config or SimulationConfig()
    cfg = SimulationConfig(**{**cfg.__dict__, "steps": T})
    return Simulator(grid, cfg).run(params, record=record)


# --- export -------------------------------------------------------------------------


def write_trajectory(directory, grid: SimulationGrid, traj: TrajectoryRecord, params: ParameterSet) -> list:
    """Per-step displacement fields in the grid file format plus a CSV summary."""
    from pathlib import Path

    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    dims = grid.sdf.dims
    written = []
    li = grid.node_lattice
    for t in range(traj.steps + 1):
        for stem, data in (("displacement", traj.u[t]), ("velocity", traj.u_dot[t])):
            field_ = np.zeros(tuple(dims) + (3,))
            field_[li[:, 0], li[:, 1], li[:, 2]] = data
            path = out / f"{stem}_{t:04d}.grid"
            write_grid_file(path, field_, grid.h, grid.sdf.origin)
            written.append(path)
    node_mass = params.mass_density * grid.node_volumes()
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "max_displacement", "min_plane_distance", "kinetic_energy"])
        for t in range(traj.steps + 1):
            ke = 0.5 * float(node_mass @ np.sum(traj.u_dot[t] ** 2, axis=1))
            dmin = float(traj.site_distances[t].min()) if traj.site_distances.shape[1] else float("nan")
            w.writerow([t, float(np.abs(traj.u[t]).max()), dmin, ke])
    return written


def read_trajectory(directory, grid: SimulationGrid) -> TrajectoryRecord:
    """Displacements and velocities written by :func:`write_trajectory` (no per-step internals)."""
    from pathlib import Path

    d = Path(directory)
    disp = sorted(d.glob("displacement_*.grid"))
    if not disp:
        raise FileNotFoundError(f"no displacement_*.grid files in {d}")
    li = grid.node_lattice
    us, vs = [], []
    for t, path in enumerate(disp):
        if path.name != f"displacement_{t:04d}.grid":
            raise GridError(f"{d}: missing step {t} in the trajectory")
        for stem, dest in (("displacement", us), ("velocity", vs)):
            values, h, origin = read_grid_file(d / f"{stem}_{t:04d}.grid")
            if values.shape != tuple(grid.sdf.dims) + (3,) or not np.isclose(h, grid.h):
                raise GridError(f"{d / path.name}: field does not match the scene grid")
            dest.append(values[li[:, 0], li[:, 1], li[:, 2]])
    u, v = np.array(us), np.array(vs)
    return TrajectoryRecord(u, v, None, None, None, None, None, np.zeros((len(u), 0)))
