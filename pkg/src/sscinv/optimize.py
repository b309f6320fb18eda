"""First-order optimizers (R-Prop, Barzilai-Borwein gradient descent, L-BFGS) and the batch runner."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .params import LOG_PARAMS, ParameterSet

log = logging.getLogger(__name__)

DEFAULT_BOUNDS = {
    "youngs_modulus": (1.0, 1e8),
    "mass_density": (1e-3, 1e3),
    "poisson_ratio": (0.0, 0.49),
    "damping_mass": (0.0, 100.0),
    "damping_stiffness": (0.0, 10.0),
    "ground_theta": (0.0, 1.5),
    "ground_phi": (-math.pi, math.pi),
}
WRAPPED = {"ground_phi": (-math.pi, math.pi)}
# natural magnitude of each linear parameter; R-Prop steps scale with max(|p0|, floor)
# so that a start at or near zero can still move
STEP_FLOORS = {
    "poisson_ratio": 0.01,
    "damping_mass": 0.01,
    "damping_stiffness": 0.01,
    "ground_theta": 0.1,
    "ground_phi": 0.1,
    "angular_velocity_x": 0.1,
    "angular_velocity_y": 0.1,
    "angular_velocity_z": 0.1,
}


@dataclass
class OptimizerConfig:
    algorithm: str = "rprop"  # rprop | gd_bb | lbfgs
    iterations: int = 30
    bounds: dict = field(default_factory=dict)  # name -> (lo, hi); merged over DEFAULT_BOUNDS
    log_space: bool = True  # optimize positive scales in log-space
    # R-Prop; None means scale-relative defaults
    eta_plus: float = 1.2
    eta_minus: float = 0.5
    delta0: Optional[float] = None
    delta_min: Optional[float] = None
    delta_max: Optional[float] = None
    # L-BFGS
    memory: int = 8
    c1: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 12
    # gradient descent
    gd_step: float = 1e-3
    # R-Prop stops once every step is below this (absolute in log-space, else relative to max(|p|, 1))
    step_tol: float = 1e-3

    def validate(self) -> None:
        if self.algorithm not in ("rprop", "gd_bb", "lbfgs"):
            raise ValueError(f"unknown optimizer {self.algorithm!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if not self.eta_minus < 1 < self.eta_plus:
            raise ValueError("R-Prop factors must satisfy eta_minus < 1 < eta_plus")
        if None not in (self.delta_min, self.delta0, self.delta_max) and not (
            self.delta_min <= self.delta0 <= self.delta_max
        ):
            raise ValueError("R-Prop steps must satisfy delta_min <= delta0 <= delta_max")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["bounds"] = {k: list(v) for k, v in self.bounds.items()}
        return d


# --- parameter transform ------------------------------------------------------------


class Transform:
    """Raw parameters <-> internal optimization coordinates (log for positive scales), with bounds."""

    def __init__(self, names, config: OptimizerConfig):
        self.names = tuple(names)
        bounds = {**DEFAULT_BOUNDS, **{k: tuple(v) for k, v in config.bounds.items()}}
        self.is_log = np.array([config.log_space and n in LOG_PARAMS for n in self.names])
        lo = np.array([bounds.get(n, (-np.inf, np.inf))[0] for n in self.names], dtype=float)
        hi = np.array([bounds.get(n, (-np.inf, np.inf))[1] for n in self.names], dtype=float)
        self.lo_raw, self.hi_raw = lo, hi
        with np.errstate(divide="ignore"):
            self.lo = np.where(self.is_log, np.log(np.maximum(lo, 1e-300)), lo)
            self.hi = np.where(self.is_log, np.log(hi), hi)
        self.wrap = [(i, WRAPPED[n]) for i, n in enumerate(self.names) if n in WRAPPED]
        self.floor = np.array([STEP_FLOORS.get(n, 1.0) for n in self.names])

    def to_internal(self, p) -> np.ndarray:
        p = np.asarray(p, dtype=float)
        return np.where(self.is_log, np.log(np.where(self.is_log, p, 1.0)), p)

    def to_raw(self, y) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        return np.where(self.is_log, np.exp(np.where(self.is_log, y, 0.0)), y)

    def grad_internal(self, p, g) -> np.ndarray:
        """dJ/dy from dJ/dp (chain rule through exp)."""
        return np.where(self.is_log, np.asarray(p) * g, g)

    def project(self, y) -> np.ndarray:
        y = np.array(y, dtype=float)
        for i, (a, b) in self.wrap:
            y[i] = a + np.mod(y[i] - a, b - a)
        return np.clip(y, self.lo, self.hi)


# --- single steps ---------------------------------------------------------------------


@dataclass
class RpropState:
    delta: np.ndarray
    prev_grad: np.ndarray
    delta_min: np.ndarray
    delta_max: np.ndarray


def rprop_init(y0, config: OptimizerConfig, is_log=None, floor=1.0) -> RpropState:
    y0 = np.asarray(y0, dtype=float)
    is_log = np.zeros(len(y0), bool) if is_log is None else np.asarray(is_log)
    scale = np.maximum(np.abs(y0), floor)
    d0 = np.where(is_log, 0.25, 0.1 * scale)
    dmax = np.where(is_log, 1.0, scale)
    dmin = np.where(is_log, 1e-6, 1e-6 * scale)
    if config.delta0 is not None:
        d0 = np.full(len(y0), config.delta0)
    if config.delta_max is not None:
        dmax = np.full(len(y0), config.delta_max)
    if config.delta_min is not None:
        dmin = np.full(len(y0), config.delta_min)
    return RpropState(d0.astype(float), np.zeros(len(y0)), dmin.astype(float), dmax.astype(float))


def step_rprop(y, g, state: RpropState, config: OptimizerConfig, project: Callable = lambda v: v):
    """Rprop without weight backtracking: after a sign change the step shrinks and that entry pauses."""
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    prod = g * state.prev_grad
    delta = state.delta.copy()
    delta = np.where(prod > 0, np.minimum(delta * config.eta_plus, state.delta_max), delta)
    delta = np.where(prod < 0, np.maximum(delta * config.eta_minus, state.delta_min), delta)
    g_eff = np.where(prod < 0, 0.0, g)
    y_new = project(y - np.sign(g_eff) * delta)
    return y_new, RpropState(delta, g_eff, state.delta_min, state.delta_max)


@dataclass
class BBState:
    step: float
    prev_y: Optional[np.ndarray] = None
    prev_g: Optional[np.ndarray] = None


def step_gd_bb(y, g, state: BBState, project: Callable = lambda v: v):
    """Projected gradient descent with Barzilai-Borwein step (dp.dg)/(dg.dg)."""
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    step = state.step
    if state.prev_y is not None:
        s = y - state.prev_y
        dg = g - state.prev_g
        den = float(dg @ dg)
        if den > 0:
            cand = float(s @ dg) / den
            if cand > 0 and np.isfinite(cand):
                step = cand
    y_new = project(y - step * g)
    return y_new, BBState(step, y.copy(), g.copy())


@dataclass
class LBFGSMemory:
    s: list = field(default_factory=list)
    y: list = field(default_factory=list)
    size: int = 8
    fallback_steps: int = 0

    def push(self, s, y) -> bool:
        """Store a pair only if it has positive curvature."""
        if float(s @ y) <= 1e-12 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            return False
        self.s.append(np.array(s, float))
        self.y.append(np.array(y, float))
        if len(self.s) > self.size:
            self.s.pop(0)
            self.y.pop(0)
        return True

    def direction(self, g) -> np.ndarray:
        q = np.array(g, dtype=float)
        if not self.s:
            return -q
        alphas = []
        for s, y in zip(reversed(self.s), reversed(self.y)):
            rho = 1.0 / float(y @ s)
            a = rho * float(s @ q)
            alphas.append((a, rho))
            q -= a * y
        gamma = float(self.s[-1] @ self.y[-1]) / float(self.y[-1] @ self.y[-1])
        r = gamma * q
        for (a, rho), s, y in zip(reversed(alphas), self.s, self.y):
            b = rho * float(y @ r)
            r += s * (a - b)
        return -r


def step_lbfgs(y, g, f0: float, memory: LBFGSMemory, cost: Callable, config: OptimizerConfig,
               project: Callable = lambda v: v, first_step: float = 1.0):
    """Two-loop direction plus backtracking line search on sufficient decrease.

    Returns (y_new, f_new, fell_back). Falls back to a short steepest-descent step when the
    line search fails.
    """
    y = np.asarray(y, dtype=float)
    g = np.asarray(g, dtype=float)
    d = memory.direction(g)
    if float(d @ g) >= 0:
        d = -g
    t = 1.0 if memory.s else first_step
    for _ in range(config.max_backtracks):
        y_new = project(y + t * d)
        f_new = cost(y_new)
        if np.isfinite(f_new) and f_new <= f0 + config.c1 * float(g @ (y_new - y)):
            return y_new, f_new, False
        t *= config.backtrack
    memory.fallback_steps += 1
    y_new = project(y - t * g)
    return y_new, cost(y_new), True


# --- driver ------------------------------------------------------------------------------


@dataclass
class RunResult:
    run_id: int
    initial: dict
    costs: list
    params: list  # per iteration raw parameter dicts
    grads: list  # per iteration dJ/dp dicts
    final: dict
    final_cost: float
    converged: bool
    failed: bool = False
    error: str = ""
    metadata: dict = field(default_factory=dict)

    @property
    def iterations(self) -> int:
        return len(self.costs)

    def write_csv(self, path) -> None:
        names = list(self.initial)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "cost"] + names + [f"d_{n}" for n in names])
            for i, (c, p, g) in enumerate(zip(self.costs, self.params, self.grads)):
                w.writerow([i, c] + [p[n] for n in names] + [g.get(n, "") for n in names])


def minimize(fun_grad: Callable, p0: ParameterSet, config: OptimizerConfig, run_id: int = 0,
             cost_only: Optional[Callable] = None) -> RunResult:
    """Optimize the enabled parameters of ``p0``.

    ``fun_grad(params) -> (cost, {name: dJ/dp})``; ``cost_only(params) -> cost`` is used by the
    L-BFGS line search (defaults to ``fun_grad``).
    """
    config.validate()
    names = p0.optimize
    tr = Transform(names, config)
    y = tr.project(tr.to_internal(p0.vector(names)))
    p = p0.with_vector(tr.to_raw(y), names)
    initial = dict(zip(names, p.vector(names)))
    costs, plist, glist = [], [], []
    converged = False
    meta = {"algorithm": config.algorithm, "log_space": [n for n, l in zip(names, tr.is_log) if l]}

    def cost_y(yy):
        pp = p0.with_vector(tr.to_raw(yy), names)
        return cost_only(pp) if cost_only is not None else fun_grad(pp)[0]

    state = rprop_init(y, config, tr.is_log, tr.floor) if config.algorithm == "rprop" else None
    bb = BBState(config.gd_step)
    mem = LBFGSMemory(size=config.memory)
    prev = None
    f = None
    last = None  # (y, f, gdict): an R-Prop pause revisits the same point
    for it in range(config.iterations):
        p = p0.with_vector(tr.to_raw(y), names)
        if last is not None and np.array_equal(last[0], y):
            f, gdict = last[1], last[2]
        else:
            f, gdict = fun_grad(p)
            last = (y.copy(), f, gdict)
        graw = np.array([gdict[n] for n in names])
        costs.append(float(f))
        plist.append(dict(zip(names, p.vector(names))))
        glist.append(dict(zip(names, graw)))
        gy = tr.grad_internal(p.vector(names), graw)
        if not np.all(np.isfinite(gy)):
            raise FloatingPointError(f"non-finite gradient at iteration {it}")
        if it == config.iterations - 1:
            break
        if config.algorithm == "rprop":
            y_new, state = step_rprop(y, gy, state, config, tr.project)
            tol = np.where(tr.is_log, config.step_tol, config.step_tol * np.maximum(np.abs(y), tr.floor))
            if np.all(state.delta <= tol) or np.all(gy == 0):
                converged = True
        elif config.algorithm == "gd_bb":
            y_new, bb = step_gd_bb(y, gy, bb, tr.project)
        else:
            if prev is not None:
                mem.push(y - prev[0], gy - prev[1])
            prev = (y.copy(), gy.copy())
            scale = config.gd_step if not mem.s else 1.0
            y_new, _, fell = step_lbfgs(y, gy, f, mem, cost_y, config, tr.project, first_step=scale)
            meta["lbfgs_fallbacks"] = mem.fallback_steps
        # an R-Prop pause after a sign flip leaves y unchanged without meaning convergence
        if config.algorithm != "rprop" and np.allclose(y_new, y, rtol=0, atol=1e-14):
            converged = True
            y = y_new
            break
        y = y_new
        if converged:
            break
    final = dict(zip(names, tr.to_raw(y)))
    # final cost is the last evaluated one; evaluate at the final iterate if it moved after that
    pf = p0.with_vector(tr.to_raw(y), names)
    if plist and np.allclose(pf.vector(names), list(plist[-1].values()), rtol=0, atol=0):
        final_cost = costs[-1]
    else:
        final_cost = float(cost_y(y))
    return RunResult(run_id, initial, costs, plist, glist, final, final_cost, converged, metadata=meta)


# --- batches ----------------------------------------------------------------------------------


def sample_initial(base: ParameterSet, perturb: dict, rng: np.random.Generator) -> ParameterSet:
    """perturb: name -> ("log_uniform", lo_factor, hi_factor) | ("uniform", lo_offset, hi_offset)
    | ("uniform_abs", lo, hi)."""
    vals = {}
    for name, spec in perturb.items():
        kind, a, b = spec
        x = base.get(name)
        if kind == "log_uniform":
            vals[name] = x * math.exp(rng.uniform(math.log(a), math.log(b)))
        elif kind == "uniform":
            vals[name] = x + rng.uniform(a, b)
        elif kind == "uniform_abs":
            vals[name] = rng.uniform(a, b)
        else:
            raise ValueError(f"unknown perturbation kind {kind!r}")
    return base.with_values(vals)


@dataclass
class BatchResult:
    runs: list
    best: int

    def summary(self) -> dict:
        ok = [r for r in self.runs if not r.failed]
        return {
            "best_run": self.best,
            "best_cost": self.runs[self.best].final_cost if self.best >= 0 else None,
            "best_params": self.runs[self.best].final if self.best >= 0 else None,
            "runs": [
                {"run": r.run_id, "initial": r.initial, "final": r.final, "final_cost": r.final_cost,
                 "initial_cost": r.costs[0] if r.costs else None, "iterations": r.iterations,
                 "converged": r.converged, "failed": r.failed, "error": r.error, "metadata": r.metadata}
                for r in self.runs
            ],
            "n_failed": len(self.runs) - len(ok),
        }

    def write(self, directory) -> None:
        out = Path(directory)
        out.mkdir(parents=True, exist_ok=True)
        for r in self.runs:
            if not r.failed:
                r.write_csv(out / f"run_{r.run_id:03d}.csv")
        with open(out / "summary.json", "w") as fh:
            json.dump(self.summary(), fh, indent=2, default=float)


def best_run(runs) -> int:
    """Lowest final cost; ties go to the lowest run id. -1 when every run failed."""
    cand = [(r.final_cost, r.run_id, i) for i, r in enumerate(runs) if not r.failed and np.isfinite(r.final_cost)]
    return min(cand)[2] if cand else -1


def _run_one(args):
    fun_grad, cost_only, p_init, config, run_id = args
    try:
        return minimize(fun_grad, p_init, config, run_id, cost_only)
    except Exception as exc:  # a failing start must not sink the batch
        log.warning("run %d failed: %s", run_id, exc)
        return RunResult(run_id, dict(zip(p_init.optimize, p_init.vector())), [], [], [], {}, float("inf"), False,
                         failed=True, error=f"{type(exc).__name__}: {exc}")


def run_batch(fun_grad: Callable, base: ParameterSet, config: OptimizerConfig, n_runs: int, perturb: dict,
              seed: int = 0, cost_only: Optional[Callable] = None, threads: int = 1) -> BatchResult:
    """Optimize from ``n_runs`` perturbed starts; the starts are fixed by ``seed`` alone."""
    if n_runs < 1:
        raise ValueError("n_runs must be at least 1")
    rng = np.random.default_rng(seed)
    starts = [sample_initial(base, perturb, rng) for _ in range(n_runs)]
    jobs = [(fun_grad, cost_only, s, config, i) for i, s in enumerate(starts)]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as ex:
            runs = list(ex.map(_run_one, jobs))
    else:
        runs = [_run_one(j) for j in jobs]
    return BatchResult(runs, best_run(runs))
