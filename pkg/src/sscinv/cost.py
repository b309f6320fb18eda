"""Sparse surface constraint cost: narrow-band displacement extension, trilinear inversion and matching."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .grid import CORNER_OFFSETS, SimulationGrid, trilinear_weight_gradients, trilinear_weights

log = logging.getLogger(__name__)

NEWTON_MAX_ITER = 20
NEWTON_TOL = 1e-9  # times h
CELL_EPS = 1e-6
DEFAULT_PHI_MAX = 5.0


class CostError(ValueError):
    pass


class ExtensionOperator:
    """Harmonic extension of object displacements into the narrow band around the object.

    Extended nodes are numbered with the object DOFs first (same indices) followed by the
    band nodes. Band values solve the 6-neighbour graph Laplace equation with the object
    values as Dirichlet data; the rim of the band has no further neighbours, which gives a
    zero normal derivative there. The operator is factorized once per grid.
    """

    def __init__(self, grid: SimulationGrid, phi_max: float = DEFAULT_PHI_MAX):
        if not phi_max > 0:
            raise CostError(f"phi_max must be positive, got {phi_max}")
        self.grid = grid
        self.phi_max = float(phi_max)
        sdf = grid.sdf
        nx, ny, nz = sdf.dims
        idx = np.stack(np.meshgrid(np.arange(nx - 1), np.arange(ny - 1), np.arange(nz - 1), indexing="ij"), -1).reshape(-1, 3)
        cphi = sdf.corner_values(idx)
        cells = idx[cphi.min(axis=1) <= self.phi_max]
        corners = cells[:, None, :] + CORNER_OFFSETS[None]  # (C, 8, 3)

        node_id = -np.ones(sdf.dims, dtype=np.int64)
        obj = grid.node_map >= 0
        node_id[obj] = grid.node_map[obj]
        N = grid.n_nodes
        in_set = np.zeros(sdf.dims, bool)
        in_set[corners[..., 0].ravel(), corners[..., 1].ravel(), corners[..., 2].ravel()] = True
        band_mask = in_set & ~obj
        band_lat = np.argwhere(band_mask)  # lexicographic
        node_id[band_lat[:, 0], band_lat[:, 1], band_lat[:, 2]] = N + np.arange(len(band_lat))
        n_ext = N + len(band_lat)
        all_set = in_set | obj

        # lattice edges inside the extended node set
        rows, cols = [], []
        for axis in range(3):
            a = [slice(None)] * 3
            b = [slice(None)] * 3
            a[axis] = slice(0, -1)
            b[axis] = slice(1, None)
            both = all_set[tuple(a)] & all_set[tuple(b)]
            rows.append(node_id[tuple(a)][both])
            cols.append(node_id[tuple(b)][both])
        rows = np.concatenate(rows)
        cols = np.concatenate(cols)
        adj = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n_ext, n_ext)).tocsr()
        adj = adj + adj.T

        # band components without contact to the object cannot be extended
        _, labels = connected_components(adj, directed=False)
        good_labels = np.unique(labels[:N])
        keep = np.isin(labels, good_labels)
        keep[:N] = True
        if not np.all(keep):
            log.info("dropping %d band nodes disconnected from the object", int((~keep).sum()))
            new = -np.ones(n_ext, dtype=np.int64)
            new[keep] = np.arange(int(keep.sum()))
            adj = adj[keep][:, keep]
            lat_keep = keep[N:]
            node_id[band_lat[~lat_keep, 0], band_lat[~lat_keep, 1], band_lat[~lat_keep, 2]] = -1
            band_lat = band_lat[lat_keep]
            mapped = node_id >= 0
            node_id[mapped] = new[node_id[mapped]]
            n_ext = int(keep.sum())

        cell_nodes = node_id[corners[..., 0], corners[..., 1], corners[..., 2]]
        ok = np.all(cell_nodes >= 0, axis=1)
        self.cells = cells[ok]
        self.cell_nodes = cell_nodes[ok]
        self.cell_phi = cphi[cphi.min(axis=1) <= self.phi_max][ok]
        self.n_object = N
        self.n_ext = n_ext
        self.band_lattice = band_lat
        self.ext_lattice = np.concatenate([grid.node_lattice, band_lat]) if len(band_lat) else grid.node_lattice.copy()
        self.rest_positions = sdf.origin + sdf.h * self.ext_lattice

        deg = np.asarray(adj.sum(axis=1)).ravel()
        nb = n_ext - N
        self.n_band = nb
        if nb:
            L = sp.diags(deg) - adj
            self.L_bb = sp.csc_matrix(L[N:, N:])
            self.A_bo = sp.csr_matrix(adj[N:, :N])
            self._lu = spla.splu(self.L_bb)
        else:
            self._lu = None

    def extend(self, u: np.ndarray) -> np.ndarray:
        """Object displacements (N, 3) -> extended field (n_ext, 3)."""
        u = np.asarray(u, dtype=float)
        if u.shape != (self.n_object, 3):
            raise CostError(f"displacement has shape {u.shape}, expected {(self.n_object, 3)}")
        if not self.n_band:
            return u.copy()
        ub = self._lu.solve(np.asarray(self.A_bo @ u))
        return np.concatenate([u, ub])

    def adjoint(self, u_ext_bar: np.ndarray) -> np.ndarray:
        """Pull back an extended-field adjoint (n_ext, 3) onto the object nodes (N, 3)."""
        out = np.array(u_ext_bar[: self.n_object], dtype=float)
        if self.n_band:
            y = self._lu.solve(np.asarray(u_ext_bar[self.n_object:], dtype=float))
            out += self.A_bo.T @ y
        return out


@dataclass
class ExtendedDisplacementField:
    values: np.ndarray  # (n_ext, 3)
    operator: ExtensionOperator

    @property
    def phi_max(self) -> float:
        return self.operator.phi_max

    def deformed_corners(self) -> np.ndarray:
        op = self.operator
        return op.rest_positions[op.cell_nodes] + self.values[op.cell_nodes]


def extend_displacements(grid: SimulationGrid, u: np.ndarray, phi_max: float = DEFAULT_PHI_MAX,
                         operator: Optional[ExtensionOperator] = None) -> ExtendedDisplacementField:
    op = operator if operator is not None else ExtensionOperator(grid, phi_max)
    return ExtendedDisplacementField(op.extend(u), op)


# --- trilinear inversion ---------------------------------------------------------


def invert_trilinear_batch(x: np.ndarray, corners: np.ndarray, h: float = 1.0):
    """Newton inversion of the trilinear map for a batch.

    x (K, 3), corners (K, 8, 3) -> (xi (K, 3), success (K,), jacobian (K, 3, 3)).
    """
    x = np.asarray(x, dtype=float)
    corners = np.asarray(corners, dtype=float)
    K = len(x)
    xi = np.full((K, 3), 0.5)
    active = np.ones(K, bool)
    done = np.zeros(K, bool)
    tol = NEWTON_TOL * h
    for _ in range(NEWTON_MAX_ITER + 1):
        ia = np.nonzero(active)[0]
        if ia.size == 0:
            break
        w = trilinear_weights(xi[ia])
        f = np.einsum("kc,kca->ka", w, corners[ia]) - x[ia]
        conv = np.linalg.norm(f, axis=1) < tol
        done[ia[conv]] = True
        active[ia[conv]] = False
        ia = ia[~conv]
        if ia.size == 0:
            break
        J = np.einsum("kca,kcb->kab", corners[ia], trilinear_weight_gradients(xi[ia]))
        det = np.linalg.det(J)
        bad = ~(np.abs(det) > 1e-14 * h ** 3) | ~np.isfinite(det)
        active[ia[bad]] = False
        ia, J, f = ia[~bad], J[~bad], f[~conv][~bad]
        xi[ia] -= np.linalg.solve(J, f[..., None])[..., 0]
        runaway = np.any(np.abs(xi[ia] - 0.5) > 1e3, axis=1) | ~np.all(np.isfinite(xi[ia]), axis=1)
        active[ia[runaway]] = False
    inside = np.all((xi >= -CELL_EPS) & (xi <= 1 + CELL_EPS), axis=1)
    success = done & inside
    xi = np.clip(np.where(success[:, None], xi, 0.5), 0.0, 1.0)
    J = np.einsum("kca,kcb->kab", corners, trilinear_weight_gradients(xi))
    return xi, success, J


def invert_trilinear(x, deformed_corners, h: float = 1.0):
    """Local weights (alpha, beta, gamma) of x in a deformed cell, or None if there is no preimage."""
    xi, ok, _ = invert_trilinear_batch(np.asarray(x, float)[None], np.asarray(deformed_corners, float)[None], h)
    return tuple(xi[0]) if ok[0] else None


@dataclass
class PointMatches:
    """Matching results of one frame (arrays over the frame's points)."""

    t: int
    points: np.ndarray  # (P, 3)
    weights: np.ndarray  # (P,)
    matched: np.ndarray  # (P,) bool
    cell: np.ndarray  # (P,) index into the operator's cell list, -1 if unmatched
    xi: np.ndarray  # (P, 3)
    phi: np.ndarray  # (P,) rest SDF at the preimage (phi_max if unmatched)
    jacobian: np.ndarray  # (P, 3, 3)

    def contributions(self, phi_max: float) -> np.ndarray:
        phi = np.where(self.matched, self.phi, phi_max)
        return self.weights * 0.5 * phi ** 2


def match_points(points: np.ndarray, field: ExtendedDisplacementField, h: float, tie_break: str = "lowest",
                 weights=None, t: int = 0) -> PointMatches:
    """Match every point into the deformed band; the preimage with the lowest rest SDF wins.

    ``tie_break`` is "lowest" (most negative value) or "nearest" (smallest magnitude).
    Points whose preimage SDF magnitude reaches phi_max count as unmatched.
    """
    if tie_break not in ("lowest", "nearest"):
        raise CostError(f"unknown tie-break rule {tie_break!r}")
    op = field.operator
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    P = len(pts)
    w = np.ones(P) if weights is None else np.asarray(weights, dtype=float)
    matched = np.zeros(P, bool)
    cell = -np.ones(P, np.int64)
    xi = np.full((P, 3), 0.5)
    phi = np.full(P, field.phi_max)
    jac = np.tile(np.eye(3), (P, 1, 1))
    if P == 0 or len(op.cells) == 0:
        return PointMatches(t, pts, w, matched, cell, xi, phi, jac)

    X = field.deformed_corners()  # (C, 8, 3)
    lo = X.min(axis=1) - CELL_EPS * h
    hi = X.max(axis=1) + CELL_EPS * h
    center = 0.5 * (lo + hi)
    radius = float(np.max(np.linalg.norm(hi - center, axis=1)))
    tree = cKDTree(center)
    cand = tree.query_ball_point(pts, r=radius * (1 + 1e-12))
    pi = np.repeat(np.arange(P), [len(c) for c in cand])
    ci = np.fromiter((c for cs in cand for c in cs), dtype=np.int64, count=len(pi))
    inbox = np.all((pts[pi] >= lo[ci]) & (pts[pi] <= hi[ci]), axis=1)
    pi, ci = pi[inbox], ci[inbox]
    if len(pi) == 0:
        return PointMatches(t, pts, w, matched, cell, xi, phi, jac)
    xis, ok, J = invert_trilinear_batch(pts[pi], X[ci], h)
    pi, ci, xis, J = pi[ok], ci[ok], xis[ok], J[ok]
    ph = np.einsum("kc,kc->k", trilinear_weights(xis), op.cell_phi[ci])
    key = ph if tie_break == "lowest" else np.abs(ph)
    # best per point: order by (point, key, cell) so the pick does not depend on search order
    order = np.lexsort((ci, key, pi))
    first = np.ones(len(order), bool)
    first[1:] = pi[order][1:] != pi[order][:-1]
    sel = order[first]
    p_sel = pi[sel]
    within = np.abs(ph[sel]) < field.phi_max
    p_sel, sel = p_sel[within], sel[within]
    matched[p_sel] = True
    cell[p_sel] = ci[sel]
    xi[p_sel] = xis[sel]
    phi[p_sel] = ph[sel]
    jac[p_sel] = J[sel]
    return PointMatches(t, pts, w, matched, cell, xi, phi, jac)


def match_point(x, field: ExtendedDisplacementField, h: float, tie_break: str = "lowest") -> PointMatches:
    return match_points(np.asarray(x, float)[None], field, h, tie_break)


def ssc_cost(observations, fields: dict, h: float, tie_break: str = "lowest"):
    """Total cost and per-frame matches. ``fields`` maps timestep -> ExtendedDisplacementField."""
    total = 0.0
    matches = []
    for fr in observations.frames:
        if fr.t not in fields:
            raise CostError(f"no displacement field for observed frame t={fr.t}")
        f = fields[fr.t]
        m = match_points(fr.points, f, h, tie_break, fr.weights, fr.t)
        total += float(np.sum(m.contributions(f.phi_max)))
        matches.append(m)
    return total, matches


def ssc_field_adjoint(m: PointMatches, field: ExtendedDisplacementField) -> np.ndarray:
    """d cost / d extended displacement for one frame, (n_ext, 3)."""
    op = field.operator
    out = np.zeros((op.n_ext, 3))
    k = np.nonzero(m.matched & (m.phi != 0.0))[0]
    if k.size == 0:
        return out
    grad_xi = np.einsum("kcd,kc->kd", trilinear_weight_gradients(m.xi[k]), op.cell_phi[m.cell[k]])
    seed = (m.weights[k] * m.phi[k])[:, None] * grad_xi
    y = np.linalg.solve(m.jacobian[k].transpose(0, 2, 1), seed[..., None])[..., 0]
    N = trilinear_weights(m.xi[k])  # (K, 8)
    contrib = -N[:, :, None] * y[:, None, :]  # (K, 8, 3)
    nodes = op.cell_nodes[m.cell[k]]
    for a in range(3):
        out[:, a] = np.bincount(nodes.ravel(), weights=contrib[..., a].ravel(), minlength=op.n_ext)
    return out


def disp_cost(u_sim, u_obs, w, v=None, udot_sim=None, udot_obs=None) -> float:
    """Known-correspondence cost: weighted squared displacement (and velocity) differences per step."""
    u_sim = np.asarray(u_sim, dtype=float)
    u_obs = np.asarray(u_obs, dtype=float)
    if u_sim.shape != u_obs.shape:
        raise CostError(f"shape mismatch {u_sim.shape} vs {u_obs.shape}")
    T = u_sim.shape[0]
    w = np.broadcast_to(np.asarray(w, dtype=float), (T,))
    J = 0.5 * float(np.sum(w * np.sum((u_sim - u_obs).reshape(T, -1) ** 2, axis=1)))
    if v is not None and udot_sim is not None:
        udot_sim = np.asarray(udot_sim, dtype=float)
        udot_obs = np.asarray(udot_obs, dtype=float)
        if udot_sim.shape != udot_obs.shape or udot_sim.shape != u_sim.shape:
            raise CostError("velocity shape mismatch")
        v = np.broadcast_to(np.asarray(v, dtype=float), (T,))
        J += 0.5 * float(np.sum(v * np.sum((udot_sim - udot_obs).reshape(T, -1) ** 2, axis=1)))
    return J


def write_match_report(path, matches, operator: ExtensionOperator) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "point", "matched", "cell_i", "cell_j", "cell_k", "alpha", "beta", "gamma", "phi"])
        for m in matches:
            for i in range(len(m.points)):
                ijk = operator.cells[m.cell[i]] if m.matched[i] else (-1, -1, -1)
                wr.writerow([m.t, i, int(m.matched[i]), *[int(v) for v in ijk], *[float(v) for v in m.xi[i]], float(m.phi[i])])
