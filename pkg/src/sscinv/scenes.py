"""Scene configuration: geometry, parameters, cameras, optimizer and batch knobs in one JSON file."""
from __future__ import annotations

import inspect
import json
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .dynamics import SimulationConfig
from .grid import (
    GENERATORS,
    SignedDistanceGrid,
    SimulationGrid,
    box_region,
    build_simulation_grid,
    make_sdf,
    read_sdf,
)
from .observation import DepthCamera
from .optimize import OptimizerConfig
from .params import GroundPlane, ParameterSet

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class BatchSpec:
    runs: int = 20
    seed: int = 0
    # name -> [kind, a, b]; see optimize.sample_initial
    perturb: dict = field(default_factory=lambda: {"youngs_modulus": ["log_uniform", 0.1, 10.0]})


@dataclass
class SceneConfig:
    name: str
    sdf: dict  # {"generator": kind, "args": {...}} or {"file": path}
    params: ParameterSet
    simulation: SimulationConfig
    dirichlet: list = field(default_factory=list)  # boxes {"lo": [x, y, z], "hi": [x, y, z]} in world units
    cameras: list = field(default_factory=list)  # DepthCamera
    every_nth: int = 1
    observation_seed: int = 0
    phi_max: float = 5.0
    tie_break: str = "lowest"
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    batch: BatchSpec = field(default_factory=BatchSpec)
    output: str = "out"
    base_dir: Optional[str] = None  # where relative paths resolve; not serialized

    # -- validation ------------------------------------------------------------

    def validate(self) -> None:
        try:
            self.simulation.validate()
            self.params.validate()
            self.optimizer.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if "file" in self.sdf:
            if set(self.sdf) != {"file"}:
                raise ConfigError("an SDF file source takes only the 'file' key")
            if not self.sdf_path().is_file():
                raise ConfigError(f"SDF file not found: {self.sdf_path()}")
        elif "generator" in self.sdf:
            if set(self.sdf) - {"generator", "args"}:
                raise ConfigError(f"unknown SDF keys: {sorted(set(self.sdf) - {'generator', 'args'})}")
            gen = GENERATORS.get(self.sdf["generator"])
            if gen is None:
                raise ConfigError(f"unknown SDF generator {self.sdf['generator']!r}; choose from {sorted(GENERATORS)}")
            try:
                inspect.signature(gen).bind(**self.sdf.get("args", {}))
            except TypeError as exc:
                raise ConfigError(f"bad arguments for SDF generator {self.sdf['generator']!r}: {exc}") from exc
        else:
            raise ConfigError("SDF source needs either 'file' or 'generator'")
        for box in self.dirichlet:
            if set(box) != {"lo", "hi"} or len(box["lo"]) != 3 or len(box["hi"]) != 3:
                raise ConfigError(f"a Dirichlet box needs 3-vectors 'lo' and 'hi', got {box}")
        if self.every_nth < 1:
            raise ConfigError("every_nth must be at least 1")
        if not self.phi_max > 0:
            raise ConfigError("phi_max must be positive")
        if self.tie_break not in ("lowest", "nearest"):
            raise ConfigError(f"unknown tie-break rule {self.tie_break!r}")
        if self.batch.runs < 1:
            raise ConfigError("a batch needs at least one run")
        for name, spec in self.batch.perturb.items():
            if name not in self.params.optimize:
                raise ConfigError(f"perturbed parameter {name!r} is not being optimized")
            if len(spec) != 3 or spec[0] not in ("log_uniform", "uniform", "uniform_abs"):
                raise ConfigError(f"bad perturbation for {name!r}: {spec}")

    def sdf_path(self) -> Path:
        p = Path(self.sdf["file"])
        return p if p.is_absolute() or self.base_dir is None else Path(self.base_dir) / p

    # -- construction ----------------------------------------------------------

    def build_sdf(self) -> SignedDistanceGrid:
        if "file" in self.sdf:
            return read_sdf(self.sdf_path())
        return make_sdf(self.sdf["generator"], **self.sdf.get("args", {}))

    def build_grid(self) -> SimulationGrid:
        region = None
        if self.dirichlet:
            boxes = [box_region(b["lo"], b["hi"]) for b in self.dirichlet]
            region = lambda x: np.any([f(x) for f in boxes], axis=0)  # noqa: E731
        return build_simulation_grid(self.build_sdf(), region)

    # -- serialization ---------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "schema": SCHEMA_VERSION,
            "name": self.name,
            "sdf": self.sdf,
            "dirichlet": self.dirichlet,
            "params": self.params.to_dict(),
            "simulation": dict(self.simulation.__dict__),
            "cameras": [c.to_dict() for c in self.cameras],
            "every_nth": self.every_nth,
            "observation_seed": self.observation_seed,
            "phi_max": self.phi_max,
            "tie_break": self.tie_break,
            "optimizer": self.optimizer.to_dict(),
            "batch": {"runs": self.batch.runs, "seed": self.batch.seed,
                      "perturb": {k: list(v) for k, v in self.batch.perturb.items()}},
            "output": self.output,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir=None) -> "SceneConfig":
        d = dict(d)
        if d.pop("schema", None) != SCHEMA_VERSION:
            raise ConfigError(f"scene files must declare \"schema\": {SCHEMA_VERSION}")
        allowed = {f.name for f in fields(cls)} - {"base_dir"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        for key in ("name", "sdf", "params", "simulation"):
            if key not in d:
                raise ConfigError(f"missing scene key {key!r}")
        try:
            d["params"] = ParameterSet.from_dict(d["params"])
            d["simulation"] = _strict(SimulationConfig, d["simulation"], "simulation")
            d["cameras"] = [DepthCamera.from_dict(c) for c in d.get("cameras", [])]
            if "optimizer" in d:
                opt = dict(d["optimizer"])
                opt["bounds"] = {k: tuple(v) for k, v in opt.get("bounds", {}).items()}
                d["optimizer"] = _strict(OptimizerConfig, opt, "optimizer")
            if "batch" in d:
                d["batch"] = _strict(BatchSpec, d["batch"], "batch")
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        cfg = cls(**d, base_dir=None if base_dir is None else str(base_dir))
        cfg.validate()
        return cfg

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


def _strict(cls, d: dict, what: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    return cls(**d)


def load_scene(path) -> SceneConfig:
    path = Path(path)
    try:
        with open(path) as fh:
            d = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read scene file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return SceneConfig.from_dict(d, base_dir=path.parent)


# --- built-in scenes ------------------------------------------------------------


def _bottom(grid: SimulationGrid) -> float:
    return float(grid.surface_sites()[0][:, 2].min())


def _center(grid: SimulationGrid) -> np.ndarray:
    return grid.rest_positions.mean(axis=0)


def _camera(center, offset, noise=0.0, res=50) -> DepthCamera:
    c = np.asarray(center, float)
    return DepthCamera(position=c + np.asarray(offset, float), look_at=c, up=(0.0, 0.0, 1.0),
                       resolution=(res, res), noise_sigma=noise)


def torus_scene(noise: float = 0.0) -> SceneConfig:
    """Torus dropped onto a flat ground; single-parameter recovery of k = 5000."""
    sdf = {"generator": "torus", "args": {"major": 4.5, "minor": 1.8}}
    cfg = SceneConfig("torus", sdf, ParameterSet(), SimulationConfig(dt=0.01, steps=40))
    grid = cfg.build_grid()
    cfg.params = ParameterSet(youngs_modulus=5000.0, ground=GroundPlane(height=_bottom(grid) - 0.5),
                              initial_velocity=(0.0, 0.0, -10.0), optimize=("youngs_modulus",))
    cfg.cameras = [_camera(_center(grid), (15.0, -20.0, 25.0), noise)]
    cfg.optimizer = OptimizerConfig(algorithm="rprop", iterations=25, step_tol=0.01)
    cfg.batch = BatchSpec(20, 0, {"youngs_modulus": ["log_uniform", 0.1, 10.0]})
    return cfg


def ball_scene() -> SceneConfig:
    """Bouncing ball on a tilted ground; joint gravity, stiffness and damping recovery."""
    sdf = {"generator": "sphere", "args": {"radius": 3.3}}
    cfg = SceneConfig("ball", sdf, ParameterSet(), SimulationConfig(dt=0.01, steps=40))
    grid = cfg.build_grid()
    names = ("gravity_x", "gravity_y", "gravity_z", "youngs_modulus", "damping_stiffness")
    cfg.params = ParameterSet(
        youngs_modulus=2000.0, damping_stiffness=0.01,
        ground=GroundPlane(height=_bottom(grid) - 0.6, theta=0.15, phi=0.4),
        initial_velocity=(2.0, 0.0, -10.0), optimize=names,
    )
    c = _center(grid)
    cfg.cameras = [_camera(c, (15.0, -20.0, 20.0)), _camera(c, (-20.0, 10.0, 15.0))]
    cfg.every_nth = 2
    cfg.optimizer = OptimizerConfig(algorithm="rprop", iterations=80)
    cfg.batch = BatchSpec(20, 1, {
        "gravity_x": ["uniform", -2.0, 2.0],
        "gravity_y": ["uniform", -2.0, 2.0],
        "gravity_z": ["uniform", -4.0, 4.0],
        "youngs_modulus": ["log_uniform", 0.3, 3.0],
        "damping_stiffness": ["uniform_abs", 0.0, 0.05],
    })
    return cfg


def bounce_scene(setting: int = 0) -> SceneConfig:
    """Single bounce of a ball on a randomly placed ground; recovers k = 2000 alone.

    ``setting`` seeds the ground orientation, its gap below the ball and the launch velocity,
    while the batch seed stays fixed so every setting starts from the same stiffness guesses.
    """
    rng = np.random.default_rng(1000 + setting)
    sdf = {"generator": "sphere", "args": {"radius": 3.3}}
    cfg = SceneConfig(f"bounce{setting}", sdf, ParameterSet(), SimulationConfig(dt=0.01, steps=20))
    grid = cfg.build_grid()
    tilt = GroundPlane(theta=float(rng.uniform(0.0, 0.3)), phi=float(rng.uniform(-np.pi, np.pi)))
    n = tilt.normal()
    gap = float(rng.uniform(0.3, 0.8))
    lowest = float((grid.surface_sites()[0] @ n).min())
    ground = GroundPlane(height=(lowest - gap) / n[2], theta=tilt.theta, phi=tilt.phi)
    v = (*rng.uniform(-3.0, 3.0, 2), rng.uniform(-14.0, -8.0))
    cfg.params = ParameterSet(youngs_modulus=2000.0, ground=ground, initial_velocity=tuple(float(x) for x in v),
                              optimize=("youngs_modulus",))
    cfg.cameras = [_camera(_center(grid), (15.0, -20.0, 20.0), float(np.sqrt(0.07)))]
    cfg.phi_max = 1.0
    cfg.optimizer = OptimizerConfig(algorithm="rprop", iterations=30)
    cfg.batch = BatchSpec(20, 3, {"youngs_modulus": ["log_uniform", 0.1, 10.0]})
    return cfg


TREE_ROOT_X = 5.0  # world x below which the trunk is clamped


def tree_scene(noise: float = 3.0) -> SceneConfig:
    """Cantilevered tree swinging under gravity, seen from the side; observed every 10th step."""
    sdf = {"generator": "tree", "args": {"trunk_length": 12.0, "trunk_radius": 3.0, "crown_radius": 5.0}}
    params = ParameterSet(youngs_modulus=4000.0, mass_density=0.1, collisions=False, optimize=("youngs_modulus",))
    cfg = SceneConfig("tree", sdf, params, SimulationConfig(dt=0.02, steps=70),
                      dirichlet=[{"lo": [-1e3, -1e3, -1e3], "hi": [TREE_ROOT_X, 1e3, 1e3]}])
    grid = cfg.build_grid()
    # looking along the bending axis keeps the view-ray noise from favouring any bend
    cfg.cameras = [_camera(_center(grid), (0.0, -30.0, 0.0), noise)]
    cfg.every_nth = 10
    cfg.batch = BatchSpec(20, 2, {"youngs_modulus": ["log_uniform", 0.3, 5.0]})
    return cfg


def bar_scene(corotation: bool = False, steps: int = 10) -> SceneConfig:
    """Bar clamped at one end, sagging under gravity; used for gradient checks."""
    sdf = {"generator": "bar", "args": {"length": 8.0, "width": 2.5}}
    params = ParameterSet(youngs_modulus=3000.0, damping_mass=0.1, damping_stiffness=0.01, collisions=False,
                          initial_velocity=(0.0, 1.0, -2.0), initial_angular_velocity=(0.1, 0.0, 0.2),
                          optimize=("gravity_x", "gravity_y", "gravity_z", "youngs_modulus", "poisson_ratio",
                                    "mass_density", "damping_mass", "damping_stiffness", "velocity_x",
                                    "velocity_y", "velocity_z", "angular_velocity_x", "angular_velocity_y",
                                    "angular_velocity_z"))
    sim = SimulationConfig(dt=0.02, steps=steps, corotation=corotation, cg_tol=1e-12)
    cfg = SceneConfig("bar", sdf, params, sim, dirichlet=[{"lo": [-1e3, -1e3, -1e3], "hi": [4.0, 1e3, 1e3]}])
    grid = cfg.build_grid()
    cfg.cameras = [_camera(_center(grid), (4.0, -15.0, 12.0))]
    cfg.batch = BatchSpec(4, 0, {"youngs_modulus": ["log_uniform", 0.5, 2.0]})
    return cfg


BUILTIN_SCENES = {"torus": torus_scene, "ball": ball_scene, "bounce": bounce_scene, "tree": tree_scene, "bar": bar_scene}


def builtin_scene(name: str) -> SceneConfig:
    try:
        return BUILTIN_SCENES[name]()
    except KeyError:
        raise ConfigError(f"unknown built-in scene {name!r}; choose from {sorted(BUILTIN_SCENES)}") from None
