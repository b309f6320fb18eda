"""Synthetic single-view depth observations and the observation text format."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .fem import deformation_gradient
from .grid import CORNER_OFFSETS, SimulationGrid, trilinear_weight_gradients, trilinear_weights

# the 12 cell edges as corner pairs (c = x + 2y + 4z)
CELL_EDGES = np.array(
    [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (1, 3), (4, 6), (5, 7), (0, 4), (1, 5), (2, 6), (3, 7)]
)


class ObservationFormatError(ValueError):
    pass


@dataclass
class DepthCamera:
    position: tuple = (0.0, 0.0, 30.0)
    look_at: tuple = (0.0, 0.0, 0.0)
    up: tuple = (0.0, 1.0, 0.0)
    resolution: tuple = (50, 50)
    fov: float = np.deg2rad(45.0)  # vertical, radians
    noise_sigma: float = 0.0

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=float)
        self.look_at = np.asarray(self.look_at, dtype=float)
        self.up = np.asarray(self.up, dtype=float)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        if self.resolution[0] < 1 or self.resolution[1] < 1:
            raise ValueError(f"bad camera resolution {self.resolution}")
        if not 0 < self.fov < np.pi:
            raise ValueError(f"field of view must lie in (0, pi), got {self.fov}")
        if np.linalg.norm(self.position - self.look_at) <= 0:
            raise ValueError("camera position coincides with its look-at point")
        if self.noise_sigma < 0:
            raise ValueError("noise sigma must be non-negative")

    def frame(self) -> np.ndarray:
        """Rows: right, true up, forward (unit vectors)."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        if np.linalg.norm(right) < 1e-12:
            right = np.cross(fwd, [1.0, 0.0, 0.0] if abs(fwd[0]) < 0.9 else [0.0, 1.0, 0.0])
        right /= np.linalg.norm(right)
        return np.stack([right, np.cross(right, fwd), fwd])

    def project(self, x: np.ndarray):
        """World points -> (pixel column, pixel row, depth, visible-in-frustum mask)."""
        cam = (np.asarray(x, dtype=float) - self.position) @ self.frame().T
        depth = cam[:, 2]
        w, h = self.resolution
        f = 0.5 * h / np.tan(0.5 * self.fov)
        with np.errstate(divide="ignore", invalid="ignore"):
            px = 0.5 * w + f * cam[:, 0] / depth
            py = 0.5 * h - f * cam[:, 1] / depth
        ok = (depth > 0) & (px >= 0) & (px < w) & (py >= 0) & (py < h)
        col = np.where(ok, np.floor(np.where(ok, px, 0)), -1).astype(np.int64)
        row = np.where(ok, np.floor(np.where(ok, py, 0)), -1).astype(np.int64)
        return col, row, depth, ok

    def to_dict(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "look_at": [float(v) for v in self.look_at],
            "up": [float(v) for v in self.up],
            "res_x": self.resolution[0],
            "res_y": self.resolution[1],
            "fov_deg": float(np.rad2deg(self.fov)),
            "noise_sigma": float(self.noise_sigma),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DepthCamera":
        unknown = set(d) - {"position", "look_at", "up", "res_x", "res_y", "fov_deg", "noise_sigma"}
        if unknown:
            raise ValueError(f"unknown camera keys: {sorted(unknown)}")
        return cls(
            position=d.get("position", (0.0, 0.0, 30.0)),
            look_at=d.get("look_at", (0.0, 0.0, 0.0)),
            up=d.get("up", (0.0, 1.0, 0.0)),
            resolution=(d.get("res_x", 50), d.get("res_y", 50)),
            fov=np.deg2rad(d.get("fov_deg", 45.0)),
            noise_sigma=d.get("noise_sigma", 0.0),
        )


def hemisphere_camera(center, distance: float, rng: np.random.Generator, **kwargs) -> DepthCamera:
    """Camera placed uniformly at random on the upper hemisphere around ``center``."""
    z = rng.uniform(0.2, 1.0)  # keep away from grazing views
    a = rng.uniform(0, 2 * np.pi)
    r = np.sqrt(1 - z * z)
    pos = np.asarray(center, float) + distance * np.array([r * np.cos(a), r * np.sin(a), z])
    return DepthCamera(position=pos, look_at=center, up=(0.0, 0.0, 1.0), **kwargs)


@dataclass
class SurfaceSamples:
    rest: np.ndarray  # (S, 3) world rest positions on the zero set
    cells: np.ndarray  # (S,) active cell index
    local: np.ndarray  # (S, 3) local cell coordinates
    normals: np.ndarray  # (S, 3) rest outward normals

    def __len__(self) -> int:
        return len(self.rest)


def extract_surface_samples(grid: SimulationGrid) -> SurfaceSamples:
    """Patch centroids plus edge crossings of every boundary cell, each crossing owned once."""
    sdf = grid.sdf
    h = grid.h
    rests, cells, locs = [], [], []
    seen = set()
    for k, e in enumerate(grid.boundary_cells):
        ijk = grid.cells[e]
        phi = sdf.corner_values(ijk[None])[0]
        locs.append(grid.patch_centroids[k])
        cells.append(e)
        for a, b in CELL_EDGES:
            pa, pb = phi[a], phi[b]
            if (pa < 0) == (pb < 0) or pa == pb:
                continue
            key = tuple(sorted((tuple(ijk + CORNER_OFFSETS[a]), tuple(ijk + CORNER_OFFSETS[b]))))
            if key in seen:
                continue
            seen.add(key)
            s = pa / (pa - pb)
            locs.append(CORNER_OFFSETS[a] + s * (CORNER_OFFSETS[b] - CORNER_OFFSETS[a]))
            cells.append(e)
    if not cells:
        z = np.zeros((0, 3))
        return SurfaceSamples(z, np.zeros(0, np.int64), z.copy(), z.copy())
    cells = np.asarray(cells, dtype=np.int64)
    locs = np.asarray(locs, dtype=float)
    rest = sdf.origin + h * (grid.cells[cells] + locs)
    phi = sdf.corner_values(grid.cells[cells])
    grad = np.einsum("skd,sk->sd", trilinear_weight_gradients(locs), phi)
    normals = grad / np.maximum(np.linalg.norm(grad, axis=1, keepdims=True), 1e-300)
    return SurfaceSamples(rest, cells, locs, normals)


def deformed_samples(grid: SimulationGrid, samples: SurfaceSamples, u: np.ndarray):
    """Current positions and normals of the samples under displacement u (N, 3)."""
    uc = u[grid.cell_nodes[samples.cells]]  # (S, 8, 3)
    x = samples.rest + np.einsum("sc,sca->sa", trilinear_weights(samples.local), uc)
    F = deformation_gradient(uc, grid.h)
    n = np.einsum("sba,sb->sa", np.linalg.inv(F), samples.normals)  # F^{-T} n
    n /= np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
    return x, n


def render_depth_frame(
    grid: SimulationGrid,
    samples: SurfaceSamples,
    u: np.ndarray,
    camera: DepthCamera,
    rng_seed,
) -> np.ndarray:
    """Nearest front-facing sample per pixel, displaced along its view ray by Gaussian noise."""
    if len(samples) == 0:
        return np.zeros((0, 3))
    x, n = deformed_samples(grid, samples, u)
    col, row, depth, ok = camera.project(x)
    front = np.einsum("sa,sa->s", n, x - camera.position) < 0
    keep = np.nonzero(ok & front)[0]
    if keep.size == 0:
        return np.zeros((0, 3))
    pix = row[keep] * camera.resolution[0] + col[keep]
    # nearest sample per pixel; lexsort on (depth, pixel) is deterministic
    order = np.lexsort((depth[keep], pix))
    pix_sorted = pix[order]
    first = np.ones(len(order), bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    chosen = keep[order[first]]
    pts = x[chosen]
    if camera.noise_sigma > 0:
        rng = np.random.default_rng(rng_seed)
        ray = pts - camera.position
        ray /= np.linalg.norm(ray, axis=1, keepdims=True)
        pts = pts + camera.noise_sigma * rng.standard_normal(len(pts))[:, None] * ray
    return pts


@dataclass
class ObservationFrame:
    t: int
    points: np.ndarray  # (n, 3)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if self.weights is None:
            self.weights = np.ones(len(self.points))
        self.weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if len(self.weights) != len(self.points):
            raise ValueError("one weight per observed point required")
        if np.any(self.weights <= 0):
            raise ValueError("observation weights must be positive")


@dataclass
class ObservationSequence:
    frames: list = field(default_factory=list)

    def __post_init__(self):
        ts = [f.t for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("frame timesteps must be strictly increasing")

    @property
    def n_points(self) -> int:
        return sum(len(f.points) for f in self.frames)

    @property
    def timesteps(self) -> list:
        return [f.t for f in self.frames]


def frame_seed(seed: int, t: int) -> np.random.SeedSequence:
    """Independent stream per frame so frames can be rendered in any order."""
    return np.random.SeedSequence([int(seed), int(t)])


def generate_observations(
    grid: SimulationGrid,
    trajectory,
    cameras: Sequence[DepthCamera] | DepthCamera,
    every_nth: int = 1,
    seed: int = 0,
    samples: Optional[SurfaceSamples] = None,
) -> ObservationSequence:
    """Frames at t = every_nth, 2 every_nth, ... up to the trajectory length."""
    if every_nth < 1:
        raise ValueError("every_nth must be at least 1")
    if isinstance(cameras, DepthCamera):
        cameras = [cameras]
    samples = extract_surface_samples(grid) if samples is None else samples
    frames = []
    for t in range(every_nth, trajectory.steps + 1, every_nth):
        parts = [
            render_depth_frame(grid, samples, trajectory.u[t], cam, np.random.default_rng(frame_seed(seed, t).spawn(len(cameras))[k]))
            for k, cam in enumerate(cameras)
        ]
        pts = np.concatenate(parts) if parts else np.zeros((0, 3))
        frames.append(ObservationFrame(t, pts, None))
    return ObservationSequence(frames)


def write_observations(seq: ObservationSequence, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"{len(seq.frames)}\n")
        for fr in seq.frames:
            fh.write(f"{fr.t} {len(fr.points)}\n")
            for p, w in zip(fr.points, fr.weights):
                fh.write(f"{float(p[0])!r} {float(p[1])!r} {float(p[2])!r} {float(w)!r}\n")


def read_observations(path) -> ObservationSequence:
    """Parse the line-oriented format; the weight column is optional (default 1)."""
    lines = Path(path).read_text().splitlines()
    pos = 0

    def next_line():
        nonlocal pos
        while pos < len(lines):
            pos += 1
            s = lines[pos - 1].strip()
            if s and not s.startswith("#"):
                return s
        raise ObservationFormatError(f"{path}:{pos}: unexpected end of file")

    def fail(msg):
        raise ObservationFormatError(f"{path}:{pos}: {msg}")

    try:
        n_frames = int(next_line())
    except ValueError:
        fail("expected frame count")
    if n_frames < 0:
        fail("negative frame count")
    frames = []
    for _ in range(n_frames):
        parts = next_line().split()
        if len(parts) != 2:
            fail("expected 't N' frame header")
        try:
            t, n = int(parts[0]), int(parts[1])
        except ValueError:
            fail("non-integer frame header")
        if n < 0:
            fail("negative point count")
        pts = np.zeros((n, 3))
        ws = np.ones(n)
        for i in range(n):
            parts = next_line().split()
            if len(parts) not in (3, 4):
                fail(f"expected 'x y z [w]', got {len(parts)} fields")
            try:
                vals = [float(v) for v in parts]
            except ValueError:
                fail("non-numeric point data")
            pts[i] = vals[:3]
            if len(vals) == 4:
                if not vals[3] > 0:
                    fail("weights must be positive")
                ws[i] = vals[3]
        if frames and t <= frames[-1].t:
            fail("frame timesteps must be strictly increasing")
        frames.append(ObservationFrame(t, pts, ws))
    while pos < len(lines):
        if lines[pos].strip() and not lines[pos].strip().startswith("#"):
            pos += 1
            fail("trailing data after the last frame")
        pos += 1
    return ObservationSequence(frames)
