"""Glue between a scene configuration and the simulation, observation and optimization modules."""
from __future__ import annotations

from dataclasses import replace
from typing import Optional

from .adjoint import InverseConfig, InverseProblem
from .dynamics import Simulator, TrajectoryRecord
from .grid import SimulationGrid
from .observation import ObservationSequence, generate_observations
from .optimize import BatchResult, run_batch
from .params import ParameterSet
from .scenes import SceneConfig


def inverse_config(scene: SceneConfig) -> InverseConfig:
    return InverseConfig(sim=scene.simulation, phi_max=scene.phi_max, tie_break=scene.tie_break)


def simulate(scene: SceneConfig, grid: Optional[SimulationGrid] = None, params: Optional[ParameterSet] = None,
             record: bool = True) -> TrajectoryRecord:
    grid = grid if grid is not None else scene.build_grid()
    return Simulator(grid, scene.simulation).run(params or scene.params, record=record)


def synthesize(scene: SceneConfig, grid: Optional[SimulationGrid] = None,
               params: Optional[ParameterSet] = None) -> ObservationSequence:
    """Observations of the scene's ground-truth motion through its cameras."""
    grid = grid if grid is not None else scene.build_grid()
    traj = simulate(scene, grid, params, record=False)
    return generate_observations(grid, traj, scene.cameras, scene.every_nth, scene.observation_seed)


class Objective:
    """Picklable ``fun_grad`` / ``cost`` pair over an inverse problem (built lazily per process)."""

    def __init__(self, scene: SceneConfig, observations: ObservationSequence, grid: Optional[SimulationGrid] = None):
        self.scene = scene
        self.observations = observations
        self._grid = grid
        self._problem = None

    @property
    def problem(self) -> InverseProblem:
        if self._problem is None:
            grid = self._grid if self._grid is not None else self.scene.build_grid()
            self._problem = InverseProblem(grid, self.observations, inverse_config(self.scene))
        return self._problem

    def __getstate__(self):
        return {"scene": self.scene, "observations": self.observations, "_grid": self._grid, "_problem": None}

    def __call__(self, params: ParameterSet):
        rep = self.problem.gradient(params)
        return rep.cost, rep.gradient

    def cost(self, params: ParameterSet) -> float:
        return self.problem.cost(params)


def optimize_scene(scene: SceneConfig, observations: ObservationSequence, start: Optional[ParameterSet] = None,
                   threads: int = 1, grid: Optional[SimulationGrid] = None) -> BatchResult:
    """Batch optimization from the scene's perturbed starts around ``start`` (default: its parameters)."""
    obj = Objective(scene, observations, grid)
    base = start or scene.params
    return run_batch(obj, base, scene.optimizer, scene.batch.runs,
                     {k: tuple(v) for k, v in scene.batch.perturb.items()},
                     seed=scene.batch.seed, cost_only=obj.cost, threads=threads)


def with_optimize(params: ParameterSet, names) -> ParameterSet:
    return replace(params, optimize=tuple(names))
