"""Reverse-mode gradients of the SSC cost through extension, time integration, assembly and collisions."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .cost import DEFAULT_PHI_MAX, ExtendedDisplacementField, ExtensionOperator, ssc_cost, ssc_field_adjoint
from .dynamics import CollisionSites, SimulationConfig, Simulator, TrajectoryRecord, newmark_matrix, softmin0, softmin0_derivatives
from .fem import BlockedSparseMatrix, batch_matvec, lame_derivatives, lame_from_young_poisson, polar_adjoint, polar_iterates, deformation_gradient
from .grid import CORNER_SIGNS, SimulationGrid
from .observation import ObservationSequence
from .params import PARAM_NAMES, GroundPlane, ParameterSet

log = logging.getLogger(__name__)


@dataclass
class InverseConfig:
    sim: SimulationConfig = field(default_factory=SimulationConfig)
    phi_max: float = DEFAULT_PHI_MAX
    tie_break: str = "lowest"
    frozen_rotations: bool = False


@dataclass
class GradientReport:
    cost: float
    gradient: dict  # name -> dJ/dp for the enabled parameters
    full_gradient: dict  # every parameter in PARAM_NAMES
    adjoint_norms: np.ndarray  # per step |lambda|
    n_matched: int = 0
    n_points: int = 0

    def vector(self, names) -> np.ndarray:
        return np.array([self.full_gradient[n] for n in names])


# --- building blocks ---------------------------------------------------------------


def _inner(X, a, b) -> float:
    """a^T X b for a dense, scipy, blocked or lumped-diagonal (per-node) matrix."""
    if isinstance(X, BlockedSparseMatrix):
        return float(np.sum(a * X.matvec(b)))
    if np.ndim(X) == 1:
        return float(np.sum(X.reshape((-1,) + (1,) * (np.ndim(a) - 1)) * a * b))
    return float(np.asarray(a).reshape(-1) @ (X @ np.asarray(b).reshape(-1)))


def adjoint_rayleigh(D_bar, M, K, alpha1: float, alpha2: float):
    """Adjoint of D = alpha1 M + alpha2 K.

    ``D_bar`` is either an explicit matrix or a rank-one pair (a, b) meaning a b^T.
    Returns (alpha1_bar, alpha2_bar, M_bar, K_bar) with the matrix adjoints in the same form.
    """
    if isinstance(D_bar, tuple):
        a, b = D_bar
        return _inner(M, a, b), _inner(K, a, b), (alpha1 * a, b), (alpha2 * a, b)
    Db = np.asarray(D_bar.toarray() if hasattr(D_bar, "toarray") else D_bar)
    Md = M.toarray() if hasattr(M, "toarray") else (np.diag(M) if np.ndim(M) == 1 else np.asarray(M))
    Kd = K.toarray() if hasattr(K, "toarray") else np.asarray(K)
    if Db.shape != Md.shape or Db.shape != Kd.shape:
        raise ValueError("damping adjoint pattern mismatch")
    return float(np.sum(Md * Db)), float(np.sum(Kd * Db)), alpha1 * Db, alpha2 * Db


@dataclass
class NewmarkAdjoint:
    u0_bar: np.ndarray
    v0_bar: np.ndarray
    lam: np.ndarray  # solution of A lam = u1_bar
    k_right: np.ndarray  # K_bar = -lam k_right^T
    force_bar: np.ndarray
    mass_bar: np.ndarray  # per node, adjoint of the lumped mass entries
    alpha1_bar: float
    alpha2_bar: float


def adjoint_newmark_step(u0, u1, v0, u1_bar, v1_bar, node_mass, K, solve: Callable, theta: float, dt: float,
                         alpha1: float = 0.0, alpha2: float = 0.0) -> NewmarkAdjoint:
    """Transpose of one theta-Newmark step with D = alpha1 M + alpha2 K and lumped M.

    ``K`` supports ``@`` (or ``matvec``); ``solve`` applies the inverse of the (symmetric) system matrix.
    Arrays are (n, d) with one lumped mass per row.
    """
    c = 1.0 / (theta * dt)
    Kmul = K.matvec if isinstance(K, BlockedSparseMatrix) else (lambda x: (np.asarray(K) @ x.reshape(-1)).reshape(x.shape))
    m = np.asarray(node_mass, dtype=float)[:, None]
    u1_bar = u1_bar + c * v1_bar
    u0_bar = -c * v1_bar
    v0_bar = -(1.0 - theta) / theta * v1_bar
    lam = solve(u1_bar)
    du = u1 - u0
    Mlam = m * lam
    u0_bar = u0_bar + c * Mlam + alpha1 * Mlam + (alpha2 - (1.0 - theta) * dt) * Kmul(lam)
    v0_bar = v0_bar + Mlam / theta
    # explicit damping adjoint: D_bar = -lam du^T
    a1_bar, a2_bar, (mb_a, mb_b), (kb_a, kb_b) = adjoint_rayleigh((-lam, du), node_mass, K if isinstance(K, BlockedSparseMatrix) else np.asarray(K), alpha1, alpha2)
    # mass terms of A and the right-hand side: -c lam du^T + lam v0^T / theta, plus the damping part
    mass_bar = np.sum(lam * (-c * du + v0 / theta), axis=1) + np.sum(mb_a * mb_b, axis=1)
    # stiffness: -(theta dt) lam u1^T - (1 - theta) dt lam u0^T, plus the damping part (-alpha2 lam du^T)
    k_right = dt * (theta * u1 + (1.0 - theta) * u0) + alpha2 * du
    return NewmarkAdjoint(u0_bar, v0_bar, lam, k_right, dt * lam, mass_bar, a1_bar, a2_bar)


def adjoint_collision(sites: CollisionSites, plane: GroundPlane, u0, v0, traction_bar, theta: float, dt: float, n_nodes: int):
    """Adjoint of the time-split site tractions -k_c (s(d) + theta dt s'(d) n.xdot) n.

    Returns (u0_bar, v0_bar, {"ground_height", "ground_theta", "ground_phi"}).
    """
    n = plane.normal()
    x = sites.positions(u0)
    xd = sites.velocities(v0)
    d = x @ n - plane.height * n[2]
    r = xd @ n
    alpha = plane.softness
    s = softmin0(d, alpha)
    ds, dds = softmin0_derivatives(d, alpha)
    psi = s + theta * dt * ds * r
    k = plane.stiffness
    psi_bar = -k * (traction_bar @ n)
    n_bar = -k * (psi[:, None] * traction_bar).sum(axis=0)
    d_bar = psi_bar * (ds + theta * dt * dds * r)
    r_bar = psi_bar * theta * dt * ds
    n_bar += (r_bar[:, None] * xd).sum(axis=0) + (d_bar[:, None] * x).sum(axis=0)
    n_bar[2] += -plane.height * d_bar.sum()
    h_bar = -n[2] * d_bar.sum()
    dn_dt, dn_dp = plane.normal_derivatives()
    u0_bar = sites.gather_interp(d_bar[:, None] * n, n_nodes)
    v0_bar = sites.gather_interp(r_bar[:, None] * n, n_nodes)
    return u0_bar, v0_bar, {"ground_height": float(h_bar), "ground_theta": float(n_bar @ dn_dt), "ground_phi": float(n_bar @ dn_dp)}


# --- full pipeline --------------------------------------------------------------------


class InverseProblem:
    """Grid, simulator, extension operator and observations bundled for cost/gradient evaluation."""

    def __init__(self, grid: SimulationGrid, observations: ObservationSequence, config: InverseConfig | None = None):
        self.grid = grid
        self.observations = observations
        self.config = config or InverseConfig()
        self.simulator = Simulator(grid, self.config.sim)
        self.extension = ExtensionOperator(grid, self.config.phi_max)
        self.frames = {fr.t: fr for fr in observations.frames}
        self.steps = self.config.sim.steps
        if observations.frames and observations.frames[-1].t > self.steps:
            raise ValueError(f"observation at t={observations.frames[-1].t} beyond the simulated {self.steps} steps")
        if observations.frames and observations.frames[0].t < 0:
            raise ValueError("negative observation timestep")

    def _fields(self, traj: TrajectoryRecord) -> dict:
        return {t: ExtendedDisplacementField(self.extension.extend(traj.u[t]), self.extension) for t in self.frames}

    def forward(self, params: ParameterSet, record: bool = True):
        traj = self.simulator.run(params, record=record)
        fields = self._fields(traj)
        J, matches = ssc_cost(self.observations, fields, self.grid.h, self.config.tie_break)
        return J, matches, fields, traj

    def cost(self, params: ParameterSet) -> float:
        return self.forward(params, record=False)[0]

    def gradient(self, params: ParameterSet) -> GradientReport:
        J, matches, fields, traj = self.forward(params, record=True)
        u_seed = {}
        for m in matches:
            fb = ssc_field_adjoint(m, fields[m.t])
            u_seed[m.t] = self.extension.adjoint(fb)
        full, norms = self.backward(params, traj, u_seed)
        grad = {n: full[n] for n in params.optimize}
        n_matched = int(sum(m.matched.sum() for m in matches))
        return GradientReport(J, grad, full, norms, n_matched, self.observations.n_points)

    def backward(self, params: ParameterSet, traj: TrajectoryRecord, u_seed: dict):
        """Reverse sweep given d cost / d u^t for some timesteps; returns all parameter gradients."""
        sim = self.simulator
        cfg = sim.config
        grid = self.grid
        asm = sim.assembler
        N = grid.n_nodes
        theta, dt = cfg.theta, cfg.dt
        T = traj.steps
        h = grid.h
        m = params.mass_density
        vol = grid.node_volumes()
        node_mass = m * vol
        a1, a2 = params.damping_mass, params.damping_stiffness
        c = 1.0 / (theta * dt)
        mu, lam_ = lame_from_young_poisson(params.youngs_modulus, params.poisson_ratio)
        g = np.asarray(params.gravity)
        x_loc = asm.x_local
        differentiate_R = cfg.corotation and not self.config.frozen_rotations

        grad = dict.fromkeys(PARAM_NAMES, 0.0)
        mu_bar = lam_bar = m_bar = 0.0
        g_bar = np.zeros(3)
        u_bar = np.array(u_seed.get(T, np.zeros((N, 3))), dtype=float)
        v_bar = np.zeros((N, 3))
        norms = np.zeros(T)
        tol = cfg.cg_tol * 0.1
        nit = asm.pattern
        for t in range(T - 1, -1, -1):
            u0, u1, v0 = traj.u[t], traj.u[t + 1], traj.u_dot[t]
            R = traj.rotations[t] if cfg.corotation else None
            K, _ = sim.stiffness(params, R)
            A = newmark_matrix(K, node_mass, c + a1, a2 + theta * dt)
            step = adjoint_newmark_step(u0, u1, v0, u_bar, v_bar, node_mass, K,
                                        lambda b: sim.solve(A, b, tol), theta, dt, a1, a2)
            norms[t] = float(np.linalg.norm(step.lam))
            lam = step.lam
            grad["damping_mass"] += step.alpha1_bar
            grad["damping_stiffness"] += step.alpha2_bar
            m_bar += float(step.mass_bar @ vol)
            ub, vb = step.u0_bar, step.v0_bar

            # stiffness: K_bar = -lam w^T
            w = step.k_right
            le, we = asm.gather(lam), asm.gather(w)
            if R is not None:
                a_ = (le @ R).reshape(-1, 24)  # R^T lam per node
                b_ = (we @ R).reshape(-1, 24)
            else:
                a_, b_ = le.reshape(-1, 24), we.reshape(-1, 24)
            Kb_mu = batch_matvec(asm.Ke_mu, b_)
            Kb_lam = batch_matvec(asm.Ke_lam, b_)
            mu_bar -= float(np.sum(a_ * Kb_mu))
            lam_bar -= float(np.sum(a_ * Kb_lam))
            if asm.has_dirichlet:
                mu_bar -= float(np.sum(lam * nit.like(asm.nitsche_mu).matvec(w)))
                lam_bar -= float(np.sum(lam * nit.like(asm.nitsche_lam).matvec(w)))

            # forces: f = f_grav + f_rot + distributed collision tractions
            fb = step.force_bar
            g_bar += node_mass @ fb
            m_bar += float(vol @ (fb @ g))
            R_bar = None
            if R is not None:
                Ke = mu * asm.Ke_mu + lam_ * asm.Ke_lam
                fe = asm.gather(fb)
                ap = (fe @ R).reshape(-1, 24)  # R^T fbar per node
                rx = (x_loc[None] - x_loc @ R).reshape(-1, 24)
                q_mu = batch_matvec(asm.Ke_mu, rx)
                q_lam = batch_matvec(asm.Ke_lam, rx)
                mu_bar += float(np.sum(ap * q_mu))
                lam_bar += float(np.sum(ap * q_lam))
                if differentiate_R:
                    Ka = batch_matvec(Ke, a_).reshape(-1, 8, 3)
                    Kb = (mu * Kb_mu + lam_ * Kb_lam).reshape(-1, 8, 3)
                    q = (mu * q_mu + lam_ * q_lam).reshape(-1, 8, 3)
                    Kap = batch_matvec(Ke, ap).reshape(-1, 8, 3)
                    tr_ = lambda X: X.transpose(0, 2, 1)  # noqa: E731
                    R_bar = -tr_(le) @ Kb - tr_(we) @ Ka + tr_(fe) @ q - x_loc.T @ Kap
            if params.collisions:
                tb = sim.sites.gather(fb)
                cu, cv, cg = adjoint_collision(sim.sites, params.ground, u0, v0, tb, theta, dt, N)
                ub = ub + cu
                vb = vb + cv
                for key, val in cg.items():
                    grad[key] += val
            if R_bar is not None:
                F = deformation_gradient(asm.gather(u0), h)
                deg = traj.degenerate[t]
                Fs = F.copy()
                Fs[deg] = np.eye(3)
                R_bar[deg] = 0.0
                F_bar = polar_adjoint(polar_iterates(Fs), R_bar)
                ue = CORNER_SIGNS @ F_bar.transpose(0, 2, 1) / (4.0 * h)
                ub = ub + asm.scatter_nodes(ue)
            u_bar = ub + u_seed.get(t, 0.0)
            v_bar = vb

        # initial velocity v0 + w x (x - c)
        xr = grid.rest_positions
        ctr = vol @ xr / vol.sum()
        vlin = v_bar.sum(axis=0)
        wbar = np.cross(xr - ctr, v_bar).sum(axis=0)
        for i, ax in enumerate("xyz"):
            grad[f"velocity_{ax}"] = float(vlin[i])
            grad[f"angular_velocity_{ax}"] = float(wbar[i])
            grad[f"gravity_{ax}"] = float(g_bar[i])
        J = lame_derivatives(params.youngs_modulus, params.poisson_ratio)
        grad["youngs_modulus"] = mu_bar * J[0, 0] + lam_bar * J[1, 0]
        grad["poisson_ratio"] = mu_bar * J[0, 1] + lam_bar * J[1, 1]
        grad["mass_density"] = m_bar
        return {k: float(v) for k, v in grad.items()}, norms


def gradient(grid: SimulationGrid, params: ParameterSet, observations: ObservationSequence,
             config: InverseConfig | None = None) -> GradientReport:
    return InverseProblem(grid, observations, config).gradient(params)


def finite_difference_gradient(cost: Callable[[ParameterSet], float], params: ParameterSet, names=None, dx=None,
                               scheme: str = "forward", base_cost: Optional[float] = None) -> dict:
    """Forward differences (f(x + dx) - f(x)) / dx per parameter, or central differences.

    ``dx`` is a scalar or a per-name dict; defaults to 1e-6 relative (absolute floor 1e-6).
    """
    names = params.optimize if names is None else tuple(names)
    out = {}
    f0 = None
    for n in names:
        x = params.get(n)
        step = dx.get(n) if isinstance(dx, dict) else dx
        if step is None:
            step = 1e-6 * max(abs(x), 1.0)
        if not step > 0:
            raise ValueError(f"finite-difference step for {n} must be positive")
        if scheme == "forward":
            if f0 is None:
                f0 = cost(params) if base_cost is None else base_cost
            out[n] = (cost(params.with_values({n: x + step})) - f0) / step
        elif scheme == "central":
            out[n] = (cost(params.with_values({n: x + step})) - cost(params.with_values({n: x - step}))) / (2 * step)
        else:
            raise ValueError(f"unknown scheme {scheme!r}")
    return out


def write_gradient_report(path, params: ParameterSet, report: GradientReport, fd: Optional[dict] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value", "dJ_dp"] + (["fd"] if fd is not None else []))
        for n in report.gradient:
            row = [n, params.get(n), report.gradient[n]]
            if fd is not None:
                row.append(fd.get(n, ""))
            w.writerow(row)


# --- estimator comparison ---------------------------------------------------------------


@dataclass
class GradientComparison:
    name: str
    value: float
    adjoint: float
    central: float
    forward: float
    forward_dx: float

    @property
    def rel_error(self) -> float:
        return abs(self.adjoint - self.central) / max(abs(self.central), 1e-12)

    @property
    def sign_agrees(self) -> bool:
        return np.sign(self.adjoint) == np.sign(self.central)


def compare_gradients(problem: InverseProblem, params: ParameterSet, names=None, central_dx=None,
                      forward_dx=None) -> list:
    """Adjoint gradient next to a central-difference oracle and a coarse forward-difference estimate.

    ``central_dx`` defaults to 1e-5 relative; ``forward_dx`` (scalar or per-name) to 1e-2 relative.
    """
    names = params.optimize if names is None else tuple(names)
    rep = problem.gradient(replace(params, optimize=tuple(names)))
    base = rep.cost
    out = []
    for n in names:
        x = params.get(n)
        cdx = central_dx.get(n) if isinstance(central_dx, dict) else central_dx
        cdx = 1e-5 * max(abs(x), 1.0) if cdx is None else cdx
        fdx = forward_dx.get(n) if isinstance(forward_dx, dict) else forward_dx
        fdx = 1e-2 * max(abs(x), 1.0) if fdx is None else fdx
        c = finite_difference_gradient(problem.cost, params, [n], cdx, "central")[n]
        f = finite_difference_gradient(problem.cost, params, [n], fdx, "forward", base_cost=base)[n]
        out.append(GradientComparison(n, x, rep.full_gradient[n], c, f, fdx))
    return out


@dataclass
class SweepPoint:
    value: float
    cost: float
    adjoint: float
    forward: float
    expected_sign: float

    @property
    def adjoint_ok(self) -> bool:
        return np.sign(self.adjoint) == self.expected_sign

    @property
    def forward_ok(self) -> bool:
        return np.sign(self.forward) == self.expected_sign


def sign_sweep(problem: InverseProblem, params: ParameterSet, name: str, values, truth: float,
               forward_dx: float) -> list:
    """Adjoint and forward-difference gradients along a one-parameter sweep.

    The expected sign points away from the ground truth: positive above it, negative below.
    """
    base = replace(params, optimize=(name,))
    out = []
    for v in values:
        p = base.with_values({name: float(v)})
        rep = problem.gradient(p)
        f = finite_difference_gradient(problem.cost, p, [name], forward_dx, "forward", base_cost=rep.cost)[name]
        out.append(SweepPoint(float(v), rep.cost, rep.gradient[name], f, float(np.sign(v - truth))))
    return out


def write_comparison(path, rows: list, sweep: Optional[list] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["parameter", "value", "adjoint", "central_fd", "forward_fd", "forward_dx", "rel_error", "sign_agrees"])
        for r in rows:
            w.writerow([r.name, r.value, r.adjoint, r.central, r.forward, r.forward_dx, r.rel_error, int(r.sign_agrees)])
    if sweep is not None:
        sweep_path = str(path).rsplit(".", 1)[0] + "_sweep.csv"
        with open(sweep_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["value", "cost", "adjoint", "forward_fd", "expected_sign", "adjoint_ok", "forward_ok"])
            for s in sweep:
                w.writerow([s.value, s.cost, s.adjoint, s.forward, s.expected_sign, int(s.adjoint_ok), int(s.forward_ok)])
