"""Embedded hexahedral discretization built from a node-sampled signed distance field.

Corner numbering inside a cell follows the binary pattern ``c = x + 2*y + 4*z``
with ``x, y, z`` in ``{0, 1}``; local cell coordinates live in ``[0, 1]^3``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

CORNER_OFFSETS = np.array(
    [[c & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)], dtype=np.int64
)
# +1 where the corner sits on the upper face of an axis, -1 on the lower face
CORNER_SIGNS = 2.0 * CORNER_OFFSETS - 1.0

# six tetrahedra around the (0 -> 7) diagonal; shared by neighbours so the
# resulting surface is watertight
_TETS = np.array(
    [[0, 1, 3, 7], [0, 3, 2, 7], [0, 2, 6, 7], [0, 6, 4, 7], [0, 4, 5, 7], [0, 5, 1, 7]]
)

VOLUME_SUBDIVISION = 16  # depth-4 octree, evaluated at the leaf level
SURFACE_SUBDIVISION = 4
NODE_VOLUME_FLOOR = 1e-6


class GridError(ValueError):
    pass


def trilinear_weights(xi: np.ndarray) -> np.ndarray:
    """Shape function values ``N_c`` at local coordinates ``xi`` (..., 3) -> (..., 8)."""
    xi = np.asarray(xi, dtype=float)
    a, b, g = xi[..., 0:1], xi[..., 1:2], xi[..., 2:3]
    ox, oy, oz = CORNER_OFFSETS[:, 0], CORNER_OFFSETS[:, 1], CORNER_OFFSETS[:, 2]
    wx = np.where(ox == 1, a, 1.0 - a)
    wy = np.where(oy == 1, b, 1.0 - b)
    wz = np.where(oz == 1, g, 1.0 - g)
    return wx * wy * wz


def trilinear_weight_gradients(xi: np.ndarray) -> np.ndarray:
    """d N_c / d xi at local coordinates ``xi`` (..., 3) -> (..., 8, 3)."""
    xi = np.asarray(xi, dtype=float)
    a, b, g = xi[..., 0:1], xi[..., 1:2], xi[..., 2:3]
    ox, oy, oz = CORNER_OFFSETS[:, 0], CORNER_OFFSETS[:, 1], CORNER_OFFSETS[:, 2]
    wx = np.where(ox == 1, a, 1.0 - a)
    wy = np.where(oy == 1, b, 1.0 - b)
    wz = np.where(oz == 1, g, 1.0 - g)
    dx = np.where(ox == 1, 1.0, -1.0) * np.ones_like(a)
    dy = np.where(oy == 1, 1.0, -1.0) * np.ones_like(b)
    dz = np.where(oz == 1, 1.0, -1.0) * np.ones_like(g)
    return np.stack([dx * wy * wz, wx * dy * wz, wx * wy * dz], axis=-1)


@dataclass
class SignedDistanceGrid:
    """Signed distance values sampled on the nodes of a regular lattice (negative inside)."""

    values: np.ndarray
    h: float = 1.0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        self.origin = np.asarray(self.origin, dtype=float).reshape(3)
        if self.values.ndim != 3 or min(self.values.shape) < 2:
            raise GridError("SDF values must be a 3D array with at least 2 nodes per axis")
        if not self.h > 0:
            raise GridError("grid spacing must be positive")
        if not np.all(np.isfinite(self.values)):
            raise GridError("SDF values must be finite")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.values.shape)

    def node_positions(self) -> np.ndarray:
        idx = np.indices(self.dims).reshape(3, -1).T
        return self.origin + self.h * idx

    def corner_values(self, cells: np.ndarray) -> np.ndarray:
        """Node values at the 8 corners of each cell index (n, 3) -> (n, 8)."""
        cells = np.asarray(cells, dtype=np.int64).reshape(-1, 3)
        c = cells[:, None, :] + CORNER_OFFSETS[None]
        return self.values[c[..., 0], c[..., 1], c[..., 2]]


def sample_sdf(grid: SignedDistanceGrid, x) -> np.ndarray | float:
    """Trilinear interpolation of the node values at world point(s) ``x``."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = x.reshape(-1, 3)
    rel = (pts - grid.origin) / grid.h
    upper = np.array(grid.dims, dtype=float) - 1.0
    tol = 1e-9
    if np.any(rel < -tol) or np.any(rel > upper + tol):
        raise GridError("sample point lies outside the lattice bounding box")
    rel = np.clip(rel, 0.0, upper)
    cell = np.minimum(np.floor(rel).astype(np.int64), np.array(grid.dims) - 2)
    xi = rel - cell
    vals = np.sum(trilinear_weights(xi) * grid.corner_values(cell), axis=-1)
    return float(vals[0]) if single else vals


def cell_volume_weights(corner_sdf, h: float, subdivision: int = VOLUME_SUBDIVISION) -> np.ndarray:
    """Integrals of the 8 shape functions over the part of a cell where the trilinear SDF is <= 0.

    Accepts a single cell (8,) or a batch (n, 8).
    """
    phi = np.asarray(corner_sdf, dtype=float)
    single = phi.ndim == 1
    phi = phi.reshape(-1, 8)
    out = np.zeros_like(phi)
    inside = np.all(phi <= 0.0, axis=1)
    out[inside] = h ** 3 / 8.0
    mixed = ~inside & np.any(phi <= 0.0, axis=1)
    if np.any(mixed):
        n = subdivision
        t = (np.arange(n) + 0.5) / n
        mid = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1).reshape(-1, 3)
        N = trilinear_weights(mid)  # (n^3, 8)
        leaf_phi = phi[mixed] @ N.T  # (m, n^3)
        filled = (leaf_phi <= 0.0).astype(float)
        out[mixed] = filled @ N * (h ** 3 / n ** 3)
    return out[0] if single else out


def _marching_tets(points: np.ndarray, values: np.ndarray):
    """Zero-set triangles of piecewise linear data on tetrahedra.

    points (T, 4, 3), values (T, 4) -> triangles (K, 3, 3), owning tet index (K,).
    """
    neg = values < 0.0
    code = (neg * (1 << np.arange(4))).sum(axis=1)
    tris, owners = [], []

    def edge_point(rows, a, b):
        va, vb = values[rows, a], values[rows, b]
        t = va / (va - vb)
        return points[rows, a] + t[:, None] * (points[rows, b] - points[rows, a])

    for c in range(1, 15):
        rows = np.nonzero(code == c)[0]
        if rows.size == 0:
            continue
        inside = [i for i in range(4) if c >> i & 1]
        outside = [i for i in range(4) if not c >> i & 1]
        if len(inside) in (1, 3):
            lone = inside[0] if len(inside) == 1 else outside[0]
            others = [i for i in range(4) if i != lone]
            p = [edge_point(rows, lone, o) for o in others]
            tris.append(np.stack(p, axis=1))
            owners.append(rows)
        else:
            a, b = inside
            cc, d = outside
            p0, p1 = edge_point(rows, a, cc), edge_point(rows, a, d)
            p2, p3 = edge_point(rows, b, d), edge_point(rows, b, cc)
            tris.append(np.stack([p0, p1, p2], axis=1))
            tris.append(np.stack([p0, p2, p3], axis=1))
            owners.extend([rows, rows])
    if not tris:
        return np.zeros((0, 3, 3)), np.zeros(0, dtype=np.int64)
    return np.concatenate(tris), np.concatenate(owners)


@dataclass
class SurfacePatch:
    """Triangulated trilinear zero set of one cell, in local [0,1]^3 coordinates."""

    triangles: np.ndarray  # (K, 3, 3)
    areas: np.ndarray  # (K,) in local units
    weights: np.ndarray  # (8,) integrals of N_i over the patch, world units
    normal: np.ndarray  # (3,)
    centroid: np.ndarray  # (3,) local coordinates, area-weighted

    @property
    def area(self) -> float:
        return float(self.areas.sum())


def cell_surface_patch(corner_sdf, h: float, subdivision: int = SURFACE_SUBDIVISION) -> SurfacePatch:
    phi = np.asarray(corner_sdf, dtype=float).reshape(8)
    if not (np.any(phi < 0.0) and np.any(phi > 0.0)):
        raise GridError("not a boundary cell: corner SDF values do not change sign")
    n = subdivision
    t = np.arange(n + 1) / n
    nodes = np.stack(np.meshgrid(t, t, t, indexing="ij"), axis=-1)  # (n+1,)*3 x 3
    node_phi = trilinear_weights(nodes) @ phi
    sub = np.indices((n, n, n)).reshape(3, -1).T  # (n^3, 3)
    corner_idx = sub[:, None, :] + CORNER_OFFSETS[None]  # (n^3, 8, 3)
    tet_idx = corner_idx[:, _TETS, :].reshape(-1, 4, 3)
    pts = tet_idx / n
    vals = node_phi[tet_idx[..., 0], tet_idx[..., 1], tet_idx[..., 2]]
    tris, _ = _marching_tets(pts, vals)
    cross = np.cross(tris[:, 1] - tris[:, 0], tris[:, 2] - tris[:, 0])
    areas = 0.5 * np.linalg.norm(cross, axis=1)
    # three interior points, exact for quadratics on a triangle
    bary = np.array([[2 / 3, 1 / 6, 1 / 6], [1 / 6, 2 / 3, 1 / 6], [1 / 6, 1 / 6, 2 / 3]])
    qp = np.einsum("qk,tkd->tqd", bary, tris)  # (K, 3, 3)
    Nq = trilinear_weights(qp)  # (K, 3, 8)
    weights = np.einsum("t,tqc->c", areas / 3.0, Nq) * h ** 2
    cent = tris.mean(axis=1)
    grad = np.einsum("kcd,c->kd", trilinear_weight_gradients(cent), phi)
    normal = (areas[:, None] * grad).sum(axis=0)
    nn = np.linalg.norm(normal)
    normal = normal / nn if nn > 0 else np.array([0.0, 0.0, 1.0])
    total = areas.sum()
    centroid = (areas[:, None] * cent).sum(axis=0) / total if total > 0 else np.full(3, 0.5)
    return SurfacePatch(tris, areas, weights, normal, centroid)


def cell_boundary_weights(corner_sdf, h: float, subdivision: int = SURFACE_SUBDIVISION):
    """Surface integrals of the 8 shape functions over the embedded zero set, plus its unit normal."""
    patch = cell_surface_patch(corner_sdf, h, subdivision)
    return patch.weights, patch.normal


def project_to_zero_set(xi: np.ndarray, phi: np.ndarray, iters: int = 20) -> np.ndarray:
    """Newton projection of local points onto the trilinear zero set of one cell."""
    xi = np.array(xi, dtype=float).reshape(-1, 3)
    for _ in range(iters):
        val = trilinear_weights(xi) @ phi
        g = np.einsum("kcd,c->kd", trilinear_weight_gradients(xi), phi)
        gg = np.maximum((g * g).sum(axis=1), 1e-300)
        step = (val / gg)[:, None] * g
        xi = np.clip(xi - step, 0.0, 1.0)
        if np.all(np.abs(val) < 1e-13):
            break
    return xi


Predicate = Callable[[np.ndarray], np.ndarray]


@dataclass
class SimulationGrid:
    """Active cells, DOF numbering and integration data of the embedded object."""

    sdf: SignedDistanceGrid
    cells: np.ndarray  # (E, 3) lattice index of each active cell
    cell_nodes: np.ndarray  # (E, 8) DOF index of each corner
    node_map: np.ndarray  # lattice shaped, DOF index or -1
    node_lattice: np.ndarray  # (N, 3) lattice index of each DOF
    w_v: np.ndarray  # (E, 8)
    boundary_cells: np.ndarray  # (B,) indices into ``cells``
    w_b: np.ndarray  # (B, 8)
    normals: np.ndarray  # (B, 3)
    patch_centroids: np.ndarray  # (B, 3) local coords, projected onto the zero set
    patch_areas: np.ndarray  # (B,) world units
    dirichlet: np.ndarray  # (B,) bool

    @property
    def h(self) -> float:
        return self.sdf.h

    @property
    def n_cells(self) -> int:
        return len(self.cells)

    @property
    def n_nodes(self) -> int:
        return len(self.node_lattice)

    @property
    def n_dofs(self) -> int:
        return 3 * self.n_nodes

    @property
    def rest_positions(self) -> np.ndarray:
        return self.sdf.origin + self.sdf.h * self.node_lattice

    @property
    def dirichlet_cells(self) -> np.ndarray:
        return self.boundary_cells[self.dirichlet]

    def node_volumes(self) -> np.ndarray:
        """Lumped volume per DOF node (sum of the volume weights of adjacent cells).

        Nodes that only touch slivers missed by the volume quadrature get a tiny floor
        so the lumped mass matrix stays positive definite.
        """
        vol = np.bincount(self.cell_nodes.ravel(), weights=self.w_v.ravel(), minlength=self.n_nodes)
        return np.maximum(vol, NODE_VOLUME_FLOOR * self.h ** 3)

    def volume(self) -> float:
        return float(self.w_v.sum())

    def surface_sites(self) -> tuple[np.ndarray, np.ndarray]:
        """World rest position of every boundary patch centroid and its owning cell index."""
        cells = self.cells[self.boundary_cells]
        pos = self.sdf.origin + self.h * (cells + self.patch_centroids)
        return pos, self.boundary_cells


def build_simulation_grid(
    sdf: SignedDistanceGrid, dirichlet_region: Optional[Predicate] = None
) -> SimulationGrid:
    """Build the embedded FEM grid: cells with at least one corner strictly inside are active."""
    dims = np.array(sdf.dims)
    all_cells = np.indices(tuple(dims - 1)).reshape(3, -1).T
    corner_phi = sdf.corner_values(all_cells)
    active = np.any(corner_phi < 0.0, axis=1)
    if not np.any(active):
        raise GridError("empty object: no node has a negative signed distance")
    cells = all_cells[active]
    phi = corner_phi[active]

    lattice_corners = cells[:, None, :] + CORNER_OFFSETS[None]
    used = np.zeros(sdf.dims, dtype=bool)
    used[lattice_corners[..., 0], lattice_corners[..., 1], lattice_corners[..., 2]] = True
    node_map = -np.ones(sdf.dims, dtype=np.int64)
    node_lattice = np.argwhere(used)  # lexicographic order
    node_map[tuple(node_lattice.T)] = np.arange(len(node_lattice))
    cell_nodes = node_map[lattice_corners[..., 0], lattice_corners[..., 1], lattice_corners[..., 2]]

    w_v = cell_volume_weights(phi, sdf.h)

    bnd = np.nonzero(np.any(phi > 0.0, axis=1))[0]
    w_b = np.zeros((len(bnd), 8))
    normals = np.zeros((len(bnd), 3))
    cents = np.zeros((len(bnd), 3))
    areas = np.zeros(len(bnd))
    for k, e in enumerate(bnd):
        patch = cell_surface_patch(phi[e], sdf.h)
        w_b[k] = patch.weights
        normals[k] = patch.normal
        cents[k] = project_to_zero_set(patch.centroid, phi[e])[0]
        areas[k] = patch.area * sdf.h ** 2
    if dirichlet_region is not None and len(bnd):
        world = sdf.origin + sdf.h * (cells[bnd] + cents)
        dirichlet = np.asarray(dirichlet_region(world), dtype=bool).reshape(len(bnd))
    else:
        dirichlet = np.zeros(len(bnd), dtype=bool)
    return SimulationGrid(
        sdf=sdf,
        cells=cells,
        cell_nodes=cell_nodes,
        node_map=node_map,
        node_lattice=node_lattice,
        w_v=w_v,
        boundary_cells=bnd,
        w_b=w_b,
        normals=normals,
        patch_centroids=cents,
        patch_areas=areas,
        dirichlet=dirichlet,
    )


def box_region(lo, hi) -> Predicate:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)

    def inside(x):
        x = np.atleast_2d(x)
        return np.all((x >= lo) & (x <= hi), axis=1)

    return inside


# --- analytic generators -------------------------------------------------------


def _lattice(shape, h, origin):
    origin = np.asarray(origin, dtype=float)
    idx = np.indices(shape).transpose(1, 2, 3, 0)
    return origin + h * idx


def _box_sdf(p, center, half):
    q = np.abs(p - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


def sphere_sdf(radius: float, padding: int = 3, h: float = 1.0, center=None) -> SignedDistanceGrid:
    n = int(np.ceil(2 * radius / h)) + 2 * padding + 1
    origin = np.zeros(3)
    c = np.full(3, (n - 1) * h / 2.0) if center is None else np.asarray(center, float)
    p = _lattice((n, n, n), h, origin)
    return SignedDistanceGrid(np.linalg.norm(p - c, axis=-1) - radius, h, origin)


def torus_sdf(major: float, minor: float, padding: int = 3, h: float = 1.0) -> SignedDistanceGrid:
    """Torus around the z axis."""
    nxy = int(np.ceil(2 * (major + minor) / h)) + 2 * padding + 1
    nz = int(np.ceil(2 * minor / h)) + 2 * padding + 1
    p = _lattice((nxy, nxy, nz), h, np.zeros(3))
    c = np.array([(nxy - 1) * h / 2, (nxy - 1) * h / 2, (nz - 1) * h / 2])
    d = p - c
    q = np.stack([np.hypot(d[..., 0], d[..., 1]) - major, d[..., 2]], axis=-1)
    return SignedDistanceGrid(np.linalg.norm(q, axis=-1) - minor, h, np.zeros(3))


def box_sdf(size, padding: int = 3, h: float = 1.0, offset: float = 0.25) -> SignedDistanceGrid:
    """Axis-aligned box; ``offset`` (in voxels) keeps the faces off the lattice planes so
    the face cells have mixed corner signs and carry boundary quadrature."""
    size = np.asarray(size, dtype=float)
    shape = tuple(int(s) for s in np.ceil(size / h) + 2 * padding + 2)
    p = _lattice(shape, h, np.zeros(3))
    center = (padding + offset) * h + size / 2.0
    return SignedDistanceGrid(_box_sdf(p, center, size / 2.0), h, np.zeros(3))


def bar_sdf(length: float, width: float, padding: int = 3, h: float = 1.0) -> SignedDistanceGrid:
    """Square-section bar along x."""
    return box_sdf([length, width, width], padding, h)


def tree_sdf(
    trunk_length: float = 9.0,
    trunk_radius: float = 1.6,
    crown_radius: float = 3.2,
    padding: int = 3,
    h: float = 1.0,
) -> SignedDistanceGrid:
    """Cylindrical trunk along +x ending in a spherical crown (a leaning tree)."""
    lx = trunk_length + 2 * crown_radius
    ly = 2 * crown_radius
    shape = (
        int(np.ceil(lx / h)) + 2 * padding + 1,
        int(np.ceil(ly / h)) + 2 * padding + 1,
        int(np.ceil(ly / h)) + 2 * padding + 1,
    )
    p = _lattice(shape, h, np.zeros(3))
    x0 = padding * h
    cy = (shape[1] - 1) * h / 2.0
    cz = (shape[2] - 1) * h / 2.0
    radial = np.hypot(p[..., 1] - cy, p[..., 2] - cz) - trunk_radius
    axial = np.abs(p[..., 0] - (x0 + trunk_length / 2)) - trunk_length / 2
    d = np.stack([radial, axial], axis=-1)
    trunk = np.minimum(np.max(d, axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    crown_c = np.array([x0 + trunk_length + crown_radius * 0.6, cy, cz])
    crown = np.linalg.norm(p - crown_c, axis=-1) - crown_radius
    return SignedDistanceGrid(np.minimum(trunk, crown), h, np.zeros(3))


GENERATORS = {
    "sphere": sphere_sdf,
    "torus": torus_sdf,
    "box": box_sdf,
    "bar": bar_sdf,
    "tree": tree_sdf,
}


def make_sdf(kind: str, **kwargs) -> SignedDistanceGrid:
    try:
        gen = GENERATORS[kind]
    except KeyError:
        raise GridError(f"unknown SDF generator {kind!r}; choose from {sorted(GENERATORS)}") from None
    return gen(**kwargs)


# --- grid files ----------------------------------------------------------------

_MAGIC = "# sdfgrid v1"


def write_grid_file(path, values: np.ndarray, h: float, origin) -> None:
    """Write node data (nx, ny, nz) or (nx, ny, nz, c) as text: header then row-major values."""
    values = np.asarray(values, dtype=float)
    comps = 1 if values.ndim == 3 else values.shape[3]
    with open(path, "w") as fh:
        fh.write(f"{_MAGIC}\n")
        fh.write("dims {} {} {}\n".format(*values.shape[:3]))
        fh.write(f"spacing {float(h)!r}\n")
        fh.write("origin {!r} {!r} {!r}\n".format(*[float(o) for o in origin]))
        fh.write(f"components {comps}\n")
        np.savetxt(fh, values.reshape(-1, comps), fmt="%.17g")


def read_grid_file(path):
    """Returns (values, h, origin)."""
    with open(path) as fh:
        lines = fh.readlines()
    if not lines or lines[0].strip() != _MAGIC:
        raise GridError(f"{path}: missing '{_MAGIC}' header")
    header = {}
    for lineno, line in enumerate(lines[1:5], start=2):
        parts = line.split()
        if len(parts) < 2:
            raise GridError(f"{path}:{lineno}: malformed header line")
        header[parts[0]] = parts[1:]
    try:
        dims = tuple(int(v) for v in header["dims"])
        h = float(header["spacing"][0])
        origin = np.array([float(v) for v in header["origin"]])
        comps = int(header["components"][0])
    except (KeyError, ValueError) as exc:
        raise GridError(f"{path}: bad header ({exc})") from None
    data = np.loadtxt(lines[5:], ndmin=2) if len(lines) > 5 else np.zeros((0, comps))
    if data.size != np.prod(dims) * comps:
        raise GridError(f"{path}: expected {np.prod(dims) * comps} values, found {data.size}")
    shape = dims if comps == 1 else dims + (comps,)
    return data.reshape(shape), h, origin


def write_sdf(path, sdf: SignedDistanceGrid) -> None:
    write_grid_file(path, sdf.values, sdf.h, sdf.origin)


def read_sdf(path) -> SignedDistanceGrid:
    values, h, origin = read_grid_file(path)
    if values.ndim != 3:
        raise GridError(f"{path}: SDF files carry exactly one component")
    return SignedDistanceGrid(values, h, origin)
