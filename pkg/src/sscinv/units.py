"""Conversion between virtual simulation units and SI units."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .grid import SignedDistanceGrid, SimulationGrid, build_simulation_grid


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class UnitCalibration:
    real_size: float  # S, meters
    virtual_size: float  # S', virtual length units
    size_axis: int  # axis along which S' was measured
    real_mass: float  # M, kg
    virtual_mass: float  # M' = m V
    volume: float  # V = f_size^3 * virtual volume
    framerate: float  # Hz
    f_size: float
    f_mass: float
    f_time: float = 1.0

    def to_dict(self) -> dict:
        return asdict(self)


def object_extent(sdf: SignedDistanceGrid) -> np.ndarray:
    """Extent of the region phi < 0 along each axis, using linear zero crossings on lattice edges."""
    v = sdf.values
    if not np.any(v < 0):
        raise CalibrationError("object is empty (no negative SDF values)")
    ext = np.zeros(3)
    for axis in range(3):
        a = np.moveaxis(v, axis, 0)
        inside = np.any((a < 0).reshape(a.shape[0], -1), axis=1)
        idx = np.nonzero(inside)[0]
        lo, hi = float(idx[0]), float(idx[-1])
        # refine with crossings on the edges leaving the inside layers
        flat = a.reshape(a.shape[0], -1)
        i0 = idx[0]
        if i0 > 0:
            p, q = flat[i0 - 1], flat[i0]
            m = (q < 0) & (p >= 0)
            s = p[m] / (p[m] - q[m])
            lo = float(np.min(i0 - 1 + s)) if s.size else lo
        i1 = idx[-1]
        if i1 < a.shape[0] - 1:
            p, q = flat[i1], flat[i1 + 1]
            m = (p < 0) & (q >= 0)
            s = p[m] / (p[m] - q[m])
            hi = float(np.max(i1 + s)) if s.size else hi
        ext[axis] = (hi - lo) * sdf.h
    return ext


def calibrate(sdf: SignedDistanceGrid, real_size: float, real_mass: float, framerate: float,
              mass_density: float = 1.0, grid: SimulationGrid | None = None) -> UnitCalibration:
    """Scaling factors from the object's real size and mass.

    S' is the longest axis of the negative region; V = f_size^3 * (sum of volume weights);
    M' = m V and f_mass = M / M'. Time is simulated at the real frame interval, so f_time = 1.
    """
    if not (real_size > 0 and real_mass > 0 and framerate > 0 and mass_density > 0):
        raise CalibrationError("size, mass, framerate and density must be positive")
    ext = object_extent(sdf)
    axis = int(np.argmax(ext))
    s_virtual = float(ext[axis])
    if s_virtual <= 0:
        raise CalibrationError("degenerate object extent")
    grid = grid if grid is not None else build_simulation_grid(sdf)
    f_size = real_size / s_virtual
    volume = f_size ** 3 * grid.volume()
    m_virtual = mass_density * volume
    return UnitCalibration(real_size, s_virtual, axis, real_mass, m_virtual, volume, framerate, f_size,
                           real_mass / m_virtual, 1.0)


def identity_calibration() -> UnitCalibration:
    return UnitCalibration(1.0, 1.0, 0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)


def young_to_si(k, cal: UnitCalibration):
    return k * cal.f_mass * cal.f_size / cal.f_time ** 2


def young_from_si(k_si, cal: UnitCalibration):
    return k_si * cal.f_time ** 2 / (cal.f_mass * cal.f_size)


def gravity_to_si(g, cal: UnitCalibration):
    return np.asarray(g, dtype=float) * cal.f_size / cal.f_time ** 2 if np.ndim(g) else g * cal.f_size / cal.f_time ** 2


def gravity_from_si(g_si, cal: UnitCalibration):
    return np.asarray(g_si, dtype=float) * cal.f_time ** 2 / cal.f_size if np.ndim(g_si) else g_si * cal.f_time ** 2 / cal.f_size


def si_report(params, cal: UnitCalibration) -> list:
    """Rows (quantity, virtual value, SI value, unit) in the layout of a results table."""
    g = np.asarray(params.gravity)
    gn = float(np.linalg.norm(g))
    rows = [
        ("camera framerate", cal.framerate, cal.framerate, "Hz"),
        ("object size", cal.virtual_size, cal.real_size, "m"),
        ("object mass", cal.virtual_mass, cal.real_mass, "kg"),
        ("gravity", gn, gn * cal.f_size / cal.f_time ** 2, "m/s^2"),
        ("Young's modulus", params.youngs_modulus, young_to_si(params.youngs_modulus, cal), "Pa"),
        ("mass damping", params.damping_mass, params.damping_mass, "-"),
        ("stiffness damping", params.damping_stiffness, params.damping_stiffness, "-"),
        ("ground height", params.ground.height, params.ground.height * cal.f_size, "m"),
        ("ground theta", params.ground.theta, float(np.rad2deg(params.ground.theta)), "deg"),
        ("ground phi", params.ground.phi, float(np.rad2deg(params.ground.phi)), "deg"),
    ]
    return rows
