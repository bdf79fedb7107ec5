import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staggdg.krylov import (
    DiffusionSolver,
    PressureSolver,
    SolverError,
    cg_solve,
    constant_nullspace,
    diffusion_operator_apply,
    pressure_operator_apply,
    wall_projector,
)
from staggdg.mesh import build_staggered_mesh, generate_rect_mesh
from staggdg.models import boundary_edges, line_weights
from staggdg.operators import StaggeredOperators


def dense(apply, shape):
    n = int(np.prod(shape))
    cols = []
    for k in range(n):
        e = np.zeros(n)
        e[k] = 1.0
        cols.append(apply(e.reshape(shape)).ravel())
    return np.array(cols).T


@pytest.fixture(scope="module")
def tg_ops():
    nodes, tris = generate_rect_mesh(0, 2 * np.pi, 0, 2 * np.pi, 8, 8)
    return StaggeredOperators(build_staggered_mesh(nodes, tris, (True, True)), 2)


def test_identity_converges_in_one_iteration():
    b = np.arange(1.0, 6.0)
    x, rep = cg_solve(lambda v: v, b)
    assert np.allclose(x, b)
    assert rep.iterations == 1 and rep.converged


def test_small_spd_against_dense_solve():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((5, 5))
    a = a @ a.T + 5 * np.eye(5)
    b = rng.standard_normal(5)
    x, rep = cg_solve(lambda v: a @ v, b, tol=1e-12)
    assert rep.converged
    assert np.allclose(x, np.linalg.solve(a, b), rtol=1e-10)


def test_zero_rhs_returns_zero():
    x, rep = cg_solve(lambda v: 2 * v, np.zeros(4))
    assert np.all(x == 0) and rep.iterations == 0


def test_cg_reports_non_convergence():
    a = np.diag(np.linspace(1, 1e4, 50))
    _, rep = cg_solve(lambda v: a @ v, np.ones(50), tol=1e-14, maxit=3)
    assert not rep.converged and rep.iterations == 3


def test_warm_start_at_solution_takes_no_iterations():
    a = np.diag([1.0, 2.0, 3.0])
    b = np.array([1.0, 1.0, 1.0])
    x, rep = cg_solve(lambda v: a @ v, b, x0=np.linalg.solve(a, b))
    assert rep.iterations == 0


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_pressure_operator_symmetry(tg_ops, seed):
    rng = np.random.default_rng(seed)
    shape = (tg_ops.mesh.n_elements, tg_ops.n_phi)
    v, w = rng.standard_normal(shape), rng.standard_normal(shape)
    a = np.sum(pressure_operator_apply(tg_ops, v) * w)
    b = np.sum(v * pressure_operator_apply(tg_ops, w))
    assert abs(a - b) <= 1e-11 * max(abs(a), abs(b))


def test_pressure_operator_nullspace_and_sign(tg_ops):
    c = np.full((tg_ops.mesh.n_elements, tg_ops.n_phi), 2.5)
    assert np.max(np.abs(pressure_operator_apply(tg_ops, c))) < 1e-11
    rng = np.random.default_rng(3)
    for _ in range(5):
        p = rng.standard_normal(c.shape)
        assert np.sum(pressure_operator_apply(tg_ops, p) * p) >= 0.0


def test_pressure_operator_dense_spectrum():
    nodes, tris = generate_rect_mesh(0, 1, 0, 1, 2, 2)
    ops = StaggeredOperators(build_staggered_mesh(nodes, tris, (True, True)), 1)
    k = dense(lambda p: pressure_operator_apply(ops, p), (ops.mesh.n_elements, ops.n_phi))
    assert np.allclose(k, k.T, atol=1e-12)
    ev = np.linalg.eigvalsh(k)
    assert ev.min() > -1e-10
    assert np.sum(np.abs(ev) < 1e-10) == 1


def test_pressure_solve_recovers_sine():
    # K p = M f with f = sin x has the continuous solution p = sin x
    errs = []
    for n in (4, 8):
        nodes, tris = generate_rect_mesh(0, 2 * np.pi, 0, 2 * np.pi, n, n)
        ops = StaggeredOperators(build_staggered_mesh(nodes, tris, (True, True)), 2)
        exact = ops.project_function_main(lambda x: np.sin(x[..., 0]))
        p, _ = PressureSolver(ops, tol=1e-12).solve(ops.mass_main(exact))
        d = p - exact
        errs.append(np.sqrt(np.sum(ops.mass_main(d) * d)))
    assert errs[1] < 0.25 * errs[0]


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(1e-4, 10.0))
def test_diffusion_operator_symmetry(seed, kl):
    nodes, tris = generate_rect_mesh(0, 1, 0, 1, 3, 2)
    ops = StaggeredOperators(build_staggered_mesh(nodes, tris), 2)
    lw = line_weights(ops, boundary_edges(ops, [0, 1]))
    rng = np.random.default_rng(seed)
    shape = (ops.mesh.n_elements, ops.n_phi)
    v, w = rng.standard_normal(shape), rng.standard_normal(shape)
    a = np.sum(diffusion_operator_apply(ops, kl, 1.0, v, lw) * w)
    b = np.sum(v * diffusion_operator_apply(ops, kl, 1.0, w, lw))
    assert abs(a - b) <= 1e-11 * max(abs(a), abs(b))


def test_diffusion_operator_two_triangles_dense():
    nodes, tris = generate_rect_mesh(0, 1, 0, 1, 1, 1)
    ops = StaggeredOperators(build_staggered_mesh(nodes, tris), 2)
    shape = (2, ops.n_phi)
    for lw in (None, np.zeros(ops.mesh.n_edges)):
        a = dense(lambda c: diffusion_operator_apply(ops, 0.3, 0.5, c, lw), shape)
        assert np.allclose(a, a.T, atol=1e-13)
        assert np.linalg.eigvalsh(a).min() > 0


def test_diffusion_operator_limits(open_mesh):
    ops = StaggeredOperators(open_mesh, 2)
    rng = np.random.default_rng(1)
    c = rng.standard_normal((open_mesh.n_elements, ops.n_phi))
    assert np.allclose(diffusion_operator_apply(ops, 0.0, 1.0, c), ops.mass_main(c))
    const = np.ones_like(c)
    natural = np.zeros(open_mesh.n_edges)
    assert np.allclose(diffusion_operator_apply(ops, 2.0, 1.0, const, natural), ops.mass_main(const), atol=1e-12)


def test_diffusion_operator_vector_fields(open_mesh):
    ops = StaggeredOperators(open_mesh, 1)
    rng = np.random.default_rng(2)
    c = rng.standard_normal((open_mesh.n_elements, ops.n_phi, 2))
    out = diffusion_operator_apply(ops, 0.7, 0.2, c)
    for k in range(2):
        assert np.allclose(out[..., k], diffusion_operator_apply(ops, 0.7, 0.2, c[..., k]))


def test_diffusion_solver_matches_dense(open_mesh):
    ops = StaggeredOperators(open_mesh, 2)
    solver = DiffusionSolver(ops, tol=1e-12)
    shape = (open_mesh.n_elements, ops.n_phi)
    rhs = np.random.default_rng(4).standard_normal(shape)
    x, rep = solver.solve(0.1, 0.5, rhs)
    a = dense(lambda c: diffusion_operator_apply(ops, 0.1, 0.5, c), shape)
    assert np.allclose(x.ravel(), np.linalg.solve(a, rhs.ravel()), rtol=1e-9, atol=1e-10)
    assert solver.calls == 1


def test_pressure_solver_singular_system(tg_ops):
    rng = np.random.default_rng(5)
    p_true = rng.standard_normal((tg_ops.mesh.n_elements, tg_ops.n_phi))
    p_true -= tg_ops.mean_main(p_true)
    rhs = pressure_operator_apply(tg_ops, p_true)
    solver = PressureSolver(tg_ops, tol=1e-12)
    p, rep = solver.solve(rhs)
    assert rep.converged
    assert abs(tg_ops.mean_main(p)) < 1e-12
    assert np.allclose(pressure_operator_apply(tg_ops, p), rhs, atol=1e-9)


def test_solver_error_carries_report(tg_ops):
    rhs = np.random.default_rng(6).standard_normal((tg_ops.mesh.n_elements, tg_ops.n_phi))
    with pytest.raises(SolverError) as err:
        PressureSolver(tg_ops, tol=1e-14, maxit=2).solve(rhs)
    assert err.value.report.iterations == 2


def test_constant_nullspace():
    r = np.array([1.0, 2.0, 6.0])
    assert np.sum(constant_nullspace(r)) == pytest.approx(0.0)


def test_wall_projector_removes_normal_component(open_mesh):
    ops = StaggeredOperators(open_mesh, 1)
    walls = boundary_edges(ops, [0, 1, 2, 3])
    proj = wall_projector(ops, walls)
    v = np.random.default_rng(7).standard_normal((open_mesh.n_edges, ops.n_psi, 2))
    pv = proj(v)
    n = open_mesh.edge_normal[walls]
    assert np.allclose(np.einsum("nke,ne->nk", pv[walls], n), 0.0)
    assert np.allclose(proj(pv), pv)
    inner = open_mesh.right_of >= 0
    assert np.array_equal(pv[inner], v[inner])


def test_pressure_with_walls_is_symmetric(open_mesh):
    ops = StaggeredOperators(open_mesh, 2)
    wall = wall_projector(ops, boundary_edges(ops, [0, 1, 2, 3]))
    shape = (open_mesh.n_elements, ops.n_phi)
    k = dense(lambda p: pressure_operator_apply(ops, p, wall), shape)
    assert np.allclose(k, k.T, atol=1e-11 * np.abs(k).max())
    assert np.linalg.eigvalsh(k).min() > -1e-9
