"""Physical parameter estimation for embedded-FEM soft bodies from sparse surface observations."""
from .adjoint import GradientReport, InverseConfig, InverseProblem
from .cost import ssc_cost
from .dynamics import SimulationConfig, Simulator, simulate_forward
from .grid import SignedDistanceGrid, SimulationGrid, build_simulation_grid
from .observation import DepthCamera, ObservationSequence, generate_observations
from .optimize import OptimizerConfig, minimize, run_batch
from .params import PARAM_NAMES, GroundPlane, ParameterSet
from .scenes import SceneConfig, builtin_scene, load_scene
from .units import UnitCalibration, calibrate

__version__ = "0.1.0"

__all__ = [
    "GradientReport",
    "InverseConfig",
    "InverseProblem",
    "ssc_cost",
    "SimulationConfig",
    "Simulator",
    "simulate_forward",
    "SignedDistanceGrid",
    "SimulationGrid",
    "build_simulation_grid",
    "DepthCamera",
    "ObservationSequence",
    "generate_observations",
    "OptimizerConfig",
    "minimize",
    "run_batch",
    "PARAM_NAMES",
    "GroundPlane",
    "ParameterSet",
    "SceneConfig",
    "builtin_scene",
    "load_scene",
    "UnitCalibration",
    "calibrate",
]
