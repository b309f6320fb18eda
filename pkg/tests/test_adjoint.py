from dataclasses import replace

import numpy as np
import pytest

from sscinv.adjoint import (
    InverseProblem,
    adjoint_newmark_step,
    adjoint_rayleigh,
    compare_gradients,
    finite_difference_gradient,
    sign_sweep,
    write_comparison,
)
from sscinv.dynamics import SimState, newmark_step
from sscinv.params import GroundPlane, ParameterSet
from sscinv.pipeline import inverse_config, synthesize
from sscinv.scenes import ball_scene, bar_scene, torus_scene


def _small_system(seed, n=4):
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(3 * n, 3 * n))
    K = A @ A.T + np.eye(3 * n)
    m = rng.uniform(0.5, 2.0, n)
    return rng, K, m


def _step(u0, v0, m, K, f, theta, dt, a1, a2):
    D = a1 * np.diag(np.repeat(m, 3)) + a2 * K
    s = newmark_step(SimState(u0, v0), m, D, K, f, f, theta, dt, solver="direct")
    return s.u, s.u_dot


def _adjoint(u0, v0, m, K, f, u1_bar, v1_bar, theta, dt, a1, a2):
    u1, _ = _step(u0, v0, m, K, f, theta, dt, a1, a2)
    c = 1.0 / (theta * dt)
    A = np.diag(np.repeat((c + a1) * m, 3)) + (a2 + theta * dt) * K
    solve = lambda b: np.linalg.solve(A, b.reshape(-1)).reshape(b.shape)  # noqa: E731
    return adjoint_newmark_step(u0, u1, v0, u1_bar, v1_bar, m, K, solve, theta, dt, a1, a2)


THETA, DT, A1, A2 = 0.6, 0.05, 0.3, 0.02


def _objective(rng, n):
    u1_bar, v1_bar = rng.normal(size=(2, n, 3))
    return u1_bar, v1_bar, lambda u1, v1: float(np.sum(u1_bar * u1) + np.sum(v1_bar * v1))


def test_newmark_adjoint_dot_product():
    rng, K, m = _small_system(0)
    n = len(m)
    u0, v0, f = rng.normal(size=(3, n, 3))
    u1_bar, v1_bar, J = _objective(rng, n)
    adj = _adjoint(u0, v0, m, K, f, u1_bar, v1_bar, THETA, DT, A1, A2)
    du, dv, df = rng.normal(size=(3, n, 3))
    # the step is affine in (u0, v0, f)
    base = J(*_step(u0, v0, m, K, f, THETA, DT, A1, A2))
    moved = J(*_step(u0 + du, v0 + dv, m, K, f + df, THETA, DT, A1, A2))
    assert np.isclose(moved - base, np.sum(adj.u0_bar * du) + np.sum(adj.v0_bar * dv) + np.sum(adj.force_bar * df),
                      rtol=1e-9)


def test_newmark_adjoint_material_terms():
    rng, K, m = _small_system(1)
    n = len(m)
    u0, v0, f = rng.normal(size=(3, n, 3))
    u1_bar, v1_bar, J = _objective(rng, n)
    adj = _adjoint(u0, v0, m, K, f, u1_bar, v1_bar, THETA, DT, A1, A2)
    eps = 1e-6

    def cost(m_=m, K_=K, a1=A1, a2=A2):
        return J(*_step(u0, v0, m_, K_, f, THETA, DT, a1, a2))

    assert np.isclose(adj.alpha1_bar, (cost(a1=A1 + eps) - cost(a1=A1 - eps)) / (2 * eps), rtol=1e-6)
    assert np.isclose(adj.alpha2_bar, (cost(a2=A2 + eps) - cost(a2=A2 - eps)) / (2 * eps), rtol=1e-6)
    dm = rng.normal(size=n)
    assert np.isclose(adj.mass_bar @ dm, (cost(m_=m + eps * dm) - cost(m_=m - eps * dm)) / (2 * eps), rtol=1e-6)
    B = rng.normal(size=K.shape)
    dK = B + B.T
    K_dir = -float(adj.lam.reshape(-1) @ dK @ adj.k_right.reshape(-1))
    assert np.isclose(K_dir, (cost(K_=K + eps * dK) - cost(K_=K - eps * dK)) / (2 * eps), rtol=1e-6)


def test_rayleigh_explicit_matches_rank_one():
    rng, K, m = _small_system(2, 3)
    a, b = rng.normal(size=(2, 9))
    explicit = adjoint_rayleigh(np.outer(a, b), np.repeat(m, 3), K, 0.3, 0.7)
    rank1 = adjoint_rayleigh((a, b), np.repeat(m, 3), K, 0.3, 0.7)
    assert np.isclose(explicit[0], rank1[0]) and np.isclose(explicit[1], rank1[1])
    assert np.allclose(explicit[2], np.outer(*rank1[2]))
    assert np.allclose(explicit[3], np.outer(*rank1[3]))


@pytest.fixture(scope="module")
def bar_problem():
    scene = bar_scene(corotation=True, steps=5)
    grid = scene.build_grid()
    obs = synthesize(scene, grid)
    return scene, InverseProblem(grid, obs, inverse_config(scene))


def test_bar_gradient_matches_central_differences(bar_problem):
    scene, prob = bar_problem
    start = scene.params.with_values({"youngs_modulus": 3500.0, "gravity_z": -9.0, "damping_mass": 0.15})
    rows = compare_gradients(prob, start)
    assert len(rows) == 14
    for r in rows:
        assert r.rel_error < 1e-4, (r.name, r.adjoint, r.central)


def test_linear_bar_gradient():
    lin = bar_scene(corotation=False, steps=5)
    grid = lin.build_grid()
    prob = InverseProblem(grid, synthesize(lin, grid), inverse_config(lin))
    rows = compare_gradients(prob, lin.params.with_values({"youngs_modulus": 2500.0}),
                             ["youngs_modulus", "poisson_ratio", "mass_density"])
    assert max(r.rel_error for r in rows) < 1e-5


def test_collision_parameter_gradients():
    scene = ball_scene()
    scene.simulation = replace(scene.simulation, steps=16)
    grid = scene.build_grid()
    obs = synthesize(scene, grid)
    prob = InverseProblem(grid, obs, inverse_config(scene))
    g = scene.params.ground
    start = replace(scene.params, ground=GroundPlane(g.height + 0.2, g.theta - 0.05, g.phi + 0.2, g.stiffness, g.softness))
    rows = compare_gradients(prob, start, ["ground_height", "ground_theta", "ground_phi", "velocity_z", "youngs_modulus"],
                             central_dx={"ground_height": 1e-5, "ground_theta": 1e-6, "ground_phi": 1e-6,
                                         "velocity_z": 1e-5, "youngs_modulus": 1e-3})
    for r in rows:
        assert r.rel_error < 1e-3, (r.name, r.adjoint, r.central)


def test_sign_sweep_brackets_truth(bar_problem, tmp_path):
    scene, prob = bar_problem
    p = replace(scene.params, optimize=("youngs_modulus",))
    sweep = sign_sweep(prob, p, "youngs_modulus", [2000.0, 4500.0], 3000.0, 10.0)
    assert [s.expected_sign for s in sweep] == [-1.0, 1.0]
    assert all(s.adjoint_ok for s in sweep)
    rows = compare_gradients(prob, p.with_values({"youngs_modulus": 2000.0}))
    write_comparison(tmp_path / "g.csv", rows, sweep)
    assert (tmp_path / "g_sweep.csv").read_text().count("\n") == 3


def test_finite_difference_validation():
    p = ParameterSet()
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda q: 0.0, p, ["youngs_modulus"], -1.0)
    with pytest.raises(ValueError):
        finite_difference_gradient(lambda q: 0.0, p, ["youngs_modulus"], 1.0, scheme="backward")
    g = finite_difference_gradient(lambda q: q.youngs_modulus ** 2, p, ["youngs_modulus"], 1.0, "central")
    assert np.isclose(g["youngs_modulus"], 2 * p.youngs_modulus)


def test_linear_torus_stiffness_gradient():
    scene = torus_scene()
    scene.simulation = replace(scene.simulation, steps=5, corotation=False)
    grid = scene.build_grid()
    prob = InverseProblem(grid, synthesize(scene, grid), inverse_config(scene))
    k = 4000.0
    (row,) = compare_gradients(prob, scene.params.with_values({"youngs_modulus": k}), ["youngs_modulus"],
                               central_dx=1e-3 * k)
    assert row.rel_error < 1e-4, (row.adjoint, row.central)


def test_no_contact_gives_zero_plane_gradients():
    scene = ball_scene()
    scene.simulation = replace(scene.simulation, steps=6)
    grid = scene.build_grid()
    g = scene.params.ground
    scene.params = replace(scene.params, ground=GroundPlane(g.height - 50.0, g.theta, g.phi, g.stiffness, g.softness))
    prob = InverseProblem(grid, synthesize(scene, grid), inverse_config(scene))
    rep = prob.gradient(scene.params.with_values({"youngs_modulus": 2500.0}))
    for name in ("ground_height", "ground_theta", "ground_phi"):
        assert abs(rep.full_gradient[name]) < 1e-12
