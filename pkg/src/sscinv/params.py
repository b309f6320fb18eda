"""Optimizable parameter set and its flat scalar view."""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from typing import Iterable

import numpy as np

# flat scalar names in a fixed order; gradients use the same names
PARAM_NAMES = (
    "gravity_x",
    "gravity_y",
    "gravity_z",
    "youngs_modulus",
    "poisson_ratio",
    "mass_density",
    "damping_mass",
    "damping_stiffness",
    "ground_height",
    "ground_theta",
    "ground_phi",
    "velocity_x",
    "velocity_y",
    "velocity_z",
    "angular_velocity_x",
    "angular_velocity_y",
    "angular_velocity_z",
)

# parameters optimized in log-space (strictly positive scales)
LOG_PARAMS = frozenset({"youngs_modulus", "mass_density"})

_VECTOR_FIELDS = {"gravity": "gravity", "velocity": "initial_velocity", "angular_velocity": "initial_angular_velocity"}


class ParameterError(ValueError):
    pass


@dataclass(frozen=True)
class GroundPlane:
    height: float = 0.0
    theta: float = 0.0
    phi: float = 0.0
    stiffness: float = 1e4
    softness: float = 8.0  # softmin sharpness, 1/length

    def normal(self) -> np.ndarray:
        st = np.sin(self.theta)
        return np.array([st * np.cos(self.phi), st * np.sin(self.phi), np.cos(self.theta)])

    def normal_derivatives(self) -> tuple[np.ndarray, np.ndarray]:
        """d n / d theta and d n / d phi."""
        st, ct = np.sin(self.theta), np.cos(self.theta)
        sp, cp = np.sin(self.phi), np.cos(self.phi)
        return np.array([ct * cp, ct * sp, -st]), np.array([-st * sp, st * cp, 0.0])

    def validate(self) -> None:
        if not self.stiffness > 0:
            raise ParameterError(f"collision stiffness must be positive, got {self.stiffness}")
        if not self.softness > 0:
            raise ParameterError(f"softmin sharpness must be positive, got {self.softness}")


@dataclass(frozen=True)
class ParameterSet:
    gravity: tuple = (0.0, 0.0, -9.81)
    youngs_modulus: float = 5000.0
    poisson_ratio: float = 0.45
    mass_density: float = 1.0
    damping_mass: float = 0.0
    damping_stiffness: float = 0.0
    ground: GroundPlane = field(default_factory=GroundPlane)
    collisions: bool = True
    initial_velocity: tuple = (0.0, 0.0, 0.0)
    initial_angular_velocity: tuple = (0.0, 0.0, 0.0)
    optimize: tuple = ("youngs_modulus",)

    def __post_init__(self):
        for name in ("gravity", "initial_velocity", "initial_angular_velocity"):
            object.__setattr__(self, name, tuple(float(x) for x in getattr(self, name)))
        object.__setattr__(self, "optimize", tuple(self.optimize))

    def validate(self) -> None:
        if not self.youngs_modulus > 0:
            raise ParameterError(f"Young's modulus must be positive, got {self.youngs_modulus}")
        if not 0 <= self.poisson_ratio < 0.5:
            raise ParameterError(f"Poisson ratio must lie in [0, 0.5), got {self.poisson_ratio}")
        if not self.mass_density > 0:
            raise ParameterError(f"mass density must be positive, got {self.mass_density}")
        if self.damping_mass < 0 or self.damping_stiffness < 0:
            raise ParameterError("damping coefficients must be non-negative")
        self.ground.validate()
        unknown = set(self.optimize) - set(PARAM_NAMES)
        if unknown:
            raise ParameterError(f"unknown optimizable parameters: {sorted(unknown)}")
        vals = np.array([self.get(n) for n in PARAM_NAMES])
        if not np.all(np.isfinite(vals)):
            raise ParameterError("non-finite parameter value")

    def get(self, name: str) -> float:
        if name.startswith("ground_"):
            return float(getattr(self.ground, name[len("ground_"):]))
        head, _, axis = name.rpartition("_")
        if head in _VECTOR_FIELDS and axis in "xyz":
            return getattr(self, _VECTOR_FIELDS[head])["xyz".index(axis)]
        if name in PARAM_NAMES:
            return float(getattr(self, name))
        raise KeyError(name)

    def with_values(self, values: dict) -> "ParameterSet":
        """Copy with the named scalars replaced."""
        p = self
        ground = {}
        for name, v in values.items():
            v = float(v)
            if name.startswith("ground_"):
                ground[name[len("ground_"):]] = v
                continue
            head, _, axis = name.rpartition("_")
            if head in _VECTOR_FIELDS and axis in "xyz":
                attr = _VECTOR_FIELDS[head]
                vec = list(getattr(p, attr))
                vec["xyz".index(axis)] = v
                p = replace(p, **{attr: tuple(vec)})
            elif name in PARAM_NAMES:
                p = replace(p, **{name: v})
            else:
                raise KeyError(name)
        if ground:
            p = replace(p, ground=replace(p.ground, **ground))
        return p

    def vector(self, names: Iterable[str] | None = None) -> np.ndarray:
        names = self.optimize if names is None else tuple(names)
        return np.array([self.get(n) for n in names])

    def with_vector(self, x, names: Iterable[str] | None = None) -> "ParameterSet":
        names = self.optimize if names is None else tuple(names)
        return self.with_values(dict(zip(names, np.asarray(x, dtype=float))))

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "ground"}
        d["ground"] = {f.name: getattr(self.ground, f.name) for f in fields(self.ground)}
        for key in ("gravity", "initial_velocity", "initial_angular_velocity", "optimize"):
            d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ParameterSet":
        d = dict(d)
        allowed = {f.name for f in fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ParameterError(f"unknown parameter keys: {sorted(unknown)}")
        if "ground" in d:
            g = dict(d["ground"])
            gallowed = {f.name for f in fields(GroundPlane)}
            bad = set(g) - gallowed
            if bad:
                raise ParameterError(f"unknown ground keys: {sorted(bad)}")
            d["ground"] = GroundPlane(**g)
        return cls(**d)
