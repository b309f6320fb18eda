import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from sscinv.fem import (
    Assembler,
    BlockedSparseMatrix,
    MaterialError,
    assemble_global,
    compute_corotation,
    deformation_gradient,
    element_stiffness,
    lame_derivatives,
    lame_from_young_poisson,
    nitsche_parts,
    polar_adjoint,
    polar_iterates,
)
from sscinv.grid import CORNER_OFFSETS
from sscinv.params import ParameterSet


def test_lame_known_values():
    mu, lam = lame_from_young_poisson(1.0, 0.25)
    assert np.isclose(mu, 0.4) and np.isclose(lam, 0.4)


@pytest.mark.parametrize("nu", [0.5, 0.7, -0.1])
def test_lame_rejects_bad_poisson(nu):
    with pytest.raises(MaterialError):
        lame_from_young_poisson(1000.0, nu)


@given(st.floats(10, 1e5), st.floats(1e-3, 0.48))
def test_lame_derivatives_match_differences(k, nu):
    J = lame_derivatives(k, nu)
    ek, en = 1e-6 * k, 1e-7
    dk = (np.array(lame_from_young_poisson(k + ek, nu)) - np.array(lame_from_young_poisson(k - ek, nu))) / (2 * ek)
    dn = (np.array(lame_from_young_poisson(k, nu + en)) - np.array(lame_from_young_poisson(k, nu - en))) / (2 * en)
    assert np.allclose(J[:, 0], dk, rtol=1e-6)
    assert np.allclose(J[:, 1], dn, rtol=1e-5)


def _rigid_modes(h):
    x = h * CORNER_OFFSETS.astype(float)
    modes = []
    for a in range(3):
        t = np.zeros((8, 3))
        t[:, a] = 1.0
        modes.append(t.ravel())
    for axis in np.eye(3):
        modes.append(np.cross(axis, x).ravel())
    return np.array(modes)


@pytest.mark.parametrize("h", [1.0, 0.5])
def test_full_cell_element_nullspace(h):
    K = element_stiffness(2.0, 3.0, np.full(8, h ** 3 / 8), h)
    assert np.allclose(K, K.T, atol=1e-12)
    ev = np.linalg.eigvalsh(K)
    assert np.sum(np.abs(ev) < 1e-9 * ev.max()) == 6
    assert np.all(ev > -1e-9 * ev.max())
    for mode in _rigid_modes(h):
        assert np.allclose(K @ mode, 0.0, atol=1e-10)


@settings(max_examples=30)
@given(st.lists(st.floats(-1, 1), min_size=9, max_size=9), st.floats(0.1, 5), st.floats(0.0, 5))
def test_uniform_strain_energy_is_exact(a, mu, lam):
    # for u = A x the strain is constant, so corner quadrature integrates the energy exactly
    h = 0.7
    A = np.array(a).reshape(3, 3)
    x = h * CORNER_OFFSETS.astype(float)
    u = (x @ A.T).ravel()
    K = element_stiffness(mu, lam, np.full(8, h ** 3 / 8), h)
    eps = 0.5 * (A + A.T)
    exact = h ** 3 * (mu * np.sum(eps * eps) + 0.5 * lam * np.trace(eps) ** 2)
    assert np.isclose(0.5 * u @ K @ u, exact, rtol=1e-10, atol=1e-12)


def test_partial_cell_scales_with_weights():
    w = np.array([0.1, 0.0, 0.05, 0.02, 0.0, 0.0, 0.1, 0.125])
    K = element_stiffness(1.0, 1.0, w, 1.0)
    assert np.allclose(K, K.T)
    for mode in _rigid_modes(1.0):
        assert np.allclose(K @ mode, 0.0, atol=1e-12)


def test_nitsche_parts_symmetric():
    rng = np.random.default_rng(0)
    w_b = rng.uniform(0, 0.2, 8)
    n = rng.normal(size=3)
    n /= np.linalg.norm(n)
    for part in nitsche_parts(w_b, n, 1.0):
        assert np.allclose(part, part.T)


def _random_rotation(seed):
    return Rotation.random(random_state=seed).as_matrix()


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.0, 0.3))
def test_polar_rotation_orthogonal(seed, stretch):
    rng = np.random.default_rng(seed)
    R0 = _random_rotation(seed)
    S = np.eye(3) + stretch * (lambda B: 0.5 * (B + B.T))(rng.normal(size=(3, 3)))
    F = (R0 @ S)[None]
    if np.linalg.det(F[0]) <= 0:
        return
    R = polar_iterates(F)[-1][0]
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-6)
    assert np.isclose(np.linalg.det(R), 1.0, atol=1e-6)
    Sym = R.T @ F[0]
    assert np.allclose(Sym, Sym.T, atol=1e-6)


def test_corotation_recovers_rigid_rotation():
    h = 1.0
    R0 = _random_rotation(3)
    x = h * CORNER_OFFSETS.astype(float)
    u = x @ R0.T - x
    rot = compute_corotation(u, h)
    assert np.allclose(rot.R, R0, atol=1e-9)
    assert not rot.degenerate.any()


def test_inverted_cell_reuses_previous_rotation():
    h = 1.0
    x = h * CORNER_OFFSETS.astype(float)
    u = -2.0 * x  # F = -I, det < 0
    prev = _random_rotation(5)[None]
    rot = compute_corotation(u[None], h, prev)
    assert rot.degenerate.all()
    assert np.allclose(rot.R, prev)


def test_polar_adjoint_matches_differences():
    rng = np.random.default_rng(7)
    F = (_random_rotation(7) @ (np.eye(3) + 0.2 * rng.normal(size=(3, 3))))[None]
    W = rng.normal(size=(1, 3, 3))

    def J(Fm):
        return float(np.sum(W * polar_iterates(Fm, tol=1e-14)[-1]))

    its = polar_iterates(F, tol=1e-14)
    G = polar_adjoint(its, W)
    eps = 1e-6
    for i in range(3):
        for j in range(3):
            E = np.zeros_like(F)
            E[0, i, j] = eps
            assert np.isclose(G[0, i, j], (J(F + E) - J(F - E)) / (2 * eps), rtol=1e-5, atol=1e-8)


def test_deformation_gradient_of_affine_field():
    A = np.array([[0.1, 0.2, 0.0], [0.0, -0.1, 0.3], [0.05, 0.0, 0.2]])
    h = 2.0
    x = h * CORNER_OFFSETS.astype(float)
    assert np.allclose(deformation_gradient(x @ A.T, h), np.eye(3) + A)


# --- blocked sparse storage and global assembly -----------------------------------------


def _random_blocked(rng, n=6):
    mask = rng.uniform(size=(n, n)) < 0.4
    rows, cols = np.nonzero(mask | mask.T)
    rows = np.concatenate([rows, np.arange(n)])
    cols = np.concatenate([cols, np.arange(n)])
    A = BlockedSparseMatrix.from_pairs(rows, cols, n)
    A.data[:] = rng.normal(size=A.data.shape)
    return A


def test_blocked_matvec_and_transpose(rng):
    A = _random_blocked(rng)
    dense = A.toarray()
    x = rng.normal(size=(A.n, 3))
    assert np.allclose(A.matvec(x).ravel(), dense @ x.ravel())
    assert np.allclose(A.transpose().toarray(), dense.T)
    assert np.allclose(A.scaled_add(2.0, A, -1.0).toarray(), dense)


def test_coo_dump(tmp_path, rng):
    A = _random_blocked(rng, 3)
    A.write_coo(tmp_path / "k.coo")
    lines = (tmp_path / "k.coo").read_text().splitlines()
    dense = np.zeros((9, 9))
    for line in lines[1:]:
        r, c, v = line.split()
        dense[int(r), int(c)] = float(v)
    assert np.array_equal(dense, A.toarray())


def test_global_matrix_symmetric_with_rotations(bar_grid, rng):
    u = 0.3 * rng.normal(size=(bar_grid.n_nodes, 3))
    K, _ = assemble_global(bar_grid, ParameterSet(youngs_modulus=3000.0), u, corotation=True)
    assert K.asymmetry() < 1e-9 * np.abs(K.data).max()


def test_global_matrix_matches_dense_assembly(ball_grid):
    asm = Assembler(ball_grid)
    K, _ = asm.assemble(1.3, 2.1, 1e3)
    dense = np.zeros((ball_grid.n_dofs, ball_grid.n_dofs))
    for e, nodes in enumerate(ball_grid.cell_nodes):
        Ke = element_stiffness(1.3, 2.1, ball_grid.w_v[e], ball_grid.h)
        dofs = (3 * nodes[:, None] + np.arange(3)).ravel()
        dense[np.ix_(dofs, dofs)] += Ke
    assert np.allclose(K.toarray(), dense, atol=1e-12)


def test_rigid_rotation_produces_no_elastic_force(ball_grid):
    R0 = _random_rotation(11)
    x = ball_grid.rest_positions
    c = x.mean(axis=0)
    u = (x - c) @ R0.T + c - x
    asm = Assembler(ball_grid)
    rot = compute_corotation(asm.gather(u), ball_grid.h)
    K, f_rot = asm.assemble(10.0, 20.0, 1e8, rot.R)
    assert np.allclose(K.matvec(u), f_rot, atol=1e-8 * np.abs(f_rot).max())


def test_gravity_force_total(ball_grid):
    _, f = assemble_global(ball_grid, ParameterSet(mass_density=2.0, gravity=(0, 0, -3.0)),
                           np.zeros((ball_grid.n_nodes, 3)), corotation=False)
    assert np.allclose(f.sum(axis=0), [0, 0, -6.0 * ball_grid.node_volumes().sum()])
