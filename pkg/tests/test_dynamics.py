import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sscinv.dynamics import (
    SimState,
    SimulationConfig,
    Simulator,
    direct_solve,
    rayleigh_damping,
    newmark_step,
    read_trajectory,
    simulate_forward,
    softmin0,
    softmin0_derivatives,
    solve_linear,
    write_trajectory,
)
from sscinv.fem import Assembler
from sscinv.params import GroundPlane, ParameterError, ParameterSet


def _spd(rng, n):
    A = rng.normal(size=(n, n))
    return A @ A.T + n * np.eye(n)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.5, 0.95), st.floats(1e-3, 0.1))
def test_newmark_step_satisfies_discrete_equations(seed, theta, dt):
    rng = np.random.default_rng(seed)
    n = 6
    M = rng.uniform(0.5, 2.0, n)
    K = _spd(rng, n)
    D = 0.1 * np.diag(M) + 0.01 * K
    u0, v0, f0, f1 = rng.normal(size=(4, n))
    s = newmark_step(SimState(u0, v0), M, D, K, f0, f1, theta, dt, solver="direct")
    u1, v1 = s.u, s.u_dot
    assert np.allclose(u1 - u0, dt * (theta * v1 + (1 - theta) * v0), atol=1e-10)
    lhs = M * (v1 - v0) + D @ (u1 - u0)
    rhs = dt * (theta * f1 + (1 - theta) * f0 - K @ (theta * u1 + (1 - theta) * u0))
    assert np.allclose(lhs, rhs, atol=1e-9)


def test_single_oscillator_decays_for_theta_above_half():
    # theta > 1/2 adds numerical dissipation; the energy of an undamped spring must not grow
    m, k, dt = 1.0, 100.0, 0.01
    s = SimState(np.array([1.0]), np.array([0.0]))
    energies = []
    for _ in range(200):
        s = newmark_step(s, np.array([m]), np.zeros((1, 1)), np.array([[k]]), [0.0], [0.0], 0.6, dt, solver="direct")
        energies.append(0.5 * m * s.u_dot[0] ** 2 + 0.5 * k * s.u[0] ** 2)
    assert np.all(np.diff(energies) <= 1e-12)
    assert energies[-1] < energies[0]


def test_newmark_rejects_theta():
    s = SimState(np.zeros(1), np.zeros(1))
    with pytest.raises(ParameterError):
        newmark_step(s, np.ones(1), np.zeros((1, 1)), np.eye(1), [0.0], [0.0], 0.4, 0.01)
    with pytest.raises(ParameterError):
        SimulationConfig(theta=1.0).validate()


def test_cg_matches_direct(ball_grid, rng):
    K, _ = Assembler(ball_grid).assemble(100.0, 300.0, 1e8)
    from sscinv.dynamics import newmark_matrix

    A = newmark_matrix(K, ball_grid.node_volumes(), 1e3, 0.01)
    b = rng.normal(size=(ball_grid.n_nodes, 3))
    x_cg = solve_linear(A, b, tol=1e-12)
    x_lu = direct_solve(A, b)
    assert np.allclose(x_cg, x_lu, rtol=1e-8, atol=1e-10 * np.abs(x_lu).max())


def test_cg_zero_rhs():
    assert np.array_equal(solve_linear(np.eye(3), np.zeros(3)), np.zeros(3))


def test_rayleigh_blocked_matches_dense(ball_grid):
    K, _ = Assembler(ball_grid).assemble(1.0, 2.0, 10.0)
    m = ball_grid.node_volumes()
    D = rayleigh_damping(m, K, 0.3, 0.02)
    dense = 0.3 * np.diag(np.repeat(m, 3)) + 0.02 * K.toarray()
    assert np.allclose(D.toarray(), dense)
    with pytest.raises(ParameterError):
        rayleigh_damping(m, K, -1.0, 0.0)


@given(st.floats(-20, 20), st.floats(0.5, 50))
def test_softmin_bounds(d, alpha):
    s = softmin0(d, alpha)
    lo = min(0.0, d) - np.log(2) / alpha
    assert lo - 1e-12 <= s <= min(0.0, d) + 1e-12


@given(st.floats(-5, 5), st.floats(0.5, 20))
def test_softmin_derivatives(d, alpha):
    eps = 1e-6
    s1, s2 = softmin0_derivatives(d, alpha)
    assert np.isclose(s1, (softmin0(d + eps, alpha) - softmin0(d - eps, alpha)) / (2 * eps), atol=1e-6)
    d1 = lambda x: softmin0_derivatives(x, alpha)[0]  # noqa: E731
    assert np.isclose(s2, (d1(d + eps) - d1(d - eps)) / (2 * eps), atol=1e-5 * alpha)


def _free(**kw):
    base = dict(collisions=False, gravity=(0.0, 0.0, 0.0))
    base.update(kw)
    return ParameterSet(**base)


def test_zero_state_is_a_fixed_point(ball_grid):
    traj = simulate_forward(ball_grid, _free(), 5)
    assert np.abs(traj.u).max() < 1e-12


@pytest.mark.parametrize("corotation", [False, True])
def test_free_flight_is_exact(ball_grid, corotation):
    # constant acceleration: v_t = v0 + g t dt, u_t = t dt v0 + g dt^2 (t (t - 1) / 2 + theta t)
    g = np.array([0.5, -1.0, -9.81])
    v0 = np.array([1.0, 2.0, 0.5])
    cfg = SimulationConfig(dt=0.02, theta=0.6, corotation=corotation, cg_tol=1e-13)
    T = 8
    traj = simulate_forward(ball_grid, _free(gravity=g, initial_velocity=v0), T, config=cfg)
    for t in range(T + 1):
        expect = t * cfg.dt * v0 + g * cfg.dt ** 2 * (t * (t - 1) / 2 + cfg.theta * t)
        assert np.allclose(traj.u[t], expect, atol=1e-8)
        assert np.allclose(traj.u_dot[t], v0 + g * t * cfg.dt, atol=1e-6)


def test_deterministic_replay(bar_grid):
    p = ParameterSet(youngs_modulus=3000.0, collisions=False)
    a = simulate_forward(bar_grid, p, 6)
    b = simulate_forward(bar_grid, p, 6)
    assert np.array_equal(a.u, b.u)


def test_dirichlet_nodes_stay_put(bar_grid):
    traj = simulate_forward(bar_grid, ParameterSet(youngs_modulus=3000.0, collisions=False), 10)
    # nodes of cells that touch the clamp region move much less than the free tip
    assert np.abs(traj.u[-1, :, 2]).max() > 0.05
    sim = Simulator(bar_grid)
    pos = sim.sites.positions(traj.u[-1])
    assert np.abs(pos[bar_grid.dirichlet] - sim.sites.rest[bar_grid.dirichlet]).max() < 1e-4


def test_rotation_spins_with_angular_velocity(ball_grid):
    w = np.array([0.0, 0.0, 2.0])
    traj = simulate_forward(ball_grid, _free(initial_angular_velocity=w, youngs_modulus=1e5), 10,
                            config=SimulationConfig(dt=0.01))
    x = ball_grid.rest_positions
    c = x.mean(axis=0)
    r0 = x - c
    r1 = r0 + traj.u[-1]
    ang = np.arctan2(r1[:, 1], r1[:, 0]) - np.arctan2(r0[:, 1], r0[:, 0])
    far = np.linalg.norm(r0[:, :2], axis=1) > 1.5
    ang = (ang[far] + np.pi) % (2 * np.pi) - np.pi
    assert np.allclose(ang, 0.2, atol=0.02)


def test_ball_bounces_on_ground(ball_grid):
    bottom = ball_grid.rest_positions[:, 2].min()
    p = ParameterSet(youngs_modulus=2000.0, initial_velocity=(0, 0, -5.0),
                     ground=GroundPlane(height=bottom - 0.5, stiffness=1e4))
    traj = simulate_forward(ball_grid, p, 60, config=SimulationConfig(dt=0.01))
    vz = traj.u_dot[:, :, 2].mean(axis=1)
    assert vz.min() < -4.0 and vz[-1] > 0.0
    assert traj.site_distances.min() > -0.5


def test_trajectory_round_trip(tmp_path, ball_grid):
    p = _free(initial_velocity=(1.0, 0.0, 0.0))
    traj = simulate_forward(ball_grid, p, 3)
    write_trajectory(tmp_path, ball_grid, traj, p)
    back = read_trajectory(tmp_path, ball_grid)
    assert np.array_equal(back.u, traj.u) and np.array_equal(back.u_dot, traj.u_dot)
    assert (tmp_path / "summary.csv").read_text().count("\n") == 5


def test_read_trajectory_missing(tmp_path, ball_grid):
    with pytest.raises(FileNotFoundError):
        read_trajectory(tmp_path, ball_grid)
