import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import perturbed_rect, random_delaunay
from staggdg.mesh import build_staggered_mesh, generate_rect_mesh, locate_point
from staggdg.operators import StaggeredOperators
from staggdg.semi_lagrangian import (
    build_foot_table,
    feet_from_displacement,
    interpolate_at_feet,
    trace_displacement,
    transported_projection,
)


def constant_velocity(ops, u):
    return np.broadcast_to(np.asarray(u, dtype=float), (ops.mesh.n_elements, ops.n_phi, 2)).copy()


def test_zero_velocity_feet_are_start_points(open_mesh):
    ops = StaggeredOperators(open_mesh, 2)
    x = ops.gauss_points().reshape(-1, 2)
    cells = np.repeat(np.arange(open_mesh.n_elements), ops.vol_rule.size)
    foot, cell, outside = trace_displacement(ops, np.zeros((open_mesh.n_elements, ops.n_phi, 2)), x, cells, 0.7)
    assert np.array_equal(foot, x)
    assert np.array_equal(cell, cells)
    assert not outside.any()


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_constant_velocity_trace_is_exact(seed):
    mesh = random_delaunay(25, seed)
    ops = StaggeredOperators(mesh, 2)
    u = np.array([0.07, -0.045])
    x = ops.gauss_points().reshape(-1, 2)
    cells = np.repeat(np.arange(mesh.n_elements), ops.vol_rule.size)
    foot, cell, outside = trace_displacement(ops, constant_velocity(ops, u), x, cells, 1.3)
    inside = ~outside
    assert np.max(np.abs(foot[inside] - (x[inside] - 1.3 * u))) < 1e-12
    lam = np.einsum("nij,nj->ni", mesh.jacobian_inv[cell[inside]], foot[inside] - mesh.nodes[mesh.triangles[cell[inside], 0]])
    assert lam.min() > -1e-12 and (lam.sum(axis=1)).max() < 1 + 1e-12


def test_constant_velocity_trace_wraps_periodically(periodic_mesh):
    ops = StaggeredOperators(periodic_mesh, 2)
    u = np.array([0.83, -0.41])
    span = 2.1
    feet = build_foot_table(ops, constant_velocity(ops, u), span)
    x = ops.gauss_points().reshape(-1, 2)
    d = feet.position - (x - span * u)
    # differences are whole periods of the unit square
    assert np.max(np.abs(d - np.round(d))) < 1e-12
    assert not feet.outside.any()


def test_trace_matches_ode_oracle_for_stretching_flow():
    # dx/dt = -v with v = (x, 0) has the exact foot x e^{-span}
    span = 0.3
    errs = []
    for n in (6, 12):
        nodes, tris = generate_rect_mesh(0.0, 2.0, 0.0, 1.0, n, n // 2)
        ops = StaggeredOperators(build_staggered_mesh(nodes, tris), 1)
        vel = ops.project_function_main(lambda x: np.stack([x[..., 0], 0 * x[..., 1]], -1))
        start = np.array([[1.7, 0.4], [1.1, 0.77], [0.9, 0.2]])
        cells = np.array([locate_point(ops.mesh, s)[0] for s in start])
        foot, _, outside = trace_displacement(ops, vel, start, cells, span)
        assert not outside.any()
        errs.append(np.max(np.abs(foot[:, 0] - start[:, 0] * np.exp(-span))))
        assert np.allclose(foot[:, 1], start[:, 1])
    straight = np.max(np.abs(start[:, 0] * (1 - span) - start[:, 0] * np.exp(-span)))
    assert errs[0] < straight
    assert errs[1] < errs[0]


def test_feet_count_and_zero_span(open_mesh):
    ops = StaggeredOperators(open_mesh, 3)
    vel = ops.project_function_main(lambda x: np.stack([np.sin(3 * x[..., 1]), x[..., 0] ** 2], -1))
    feet = build_foot_table(ops, vel, 0.0)
    assert feet.position.shape == (open_mesh.n_elements * ops.vol_rule.size, 2)
    assert np.allclose(feet.position, ops.gauss_points().reshape(-1, 2), atol=1e-14)
    feet = build_foot_table(ops, vel, 0.05)
    assert feet.shape == (open_mesh.n_elements, ops.vol_rule.size)


def test_one_period_translation_returns_congruent_feet(periodic_mesh):
    ops = StaggeredOperators(periodic_mesh, 2)
    disp = np.zeros((periodic_mesh.n_elements, ops.vol_rule.size, 2))
    disp[..., 0] = 1.0
    feet = feet_from_displacement(ops, disp)
    x = ops.gauss_points().reshape(-1, 2)
    assert np.allclose(feet.position, x + [1.0, 0.0] + feet.shift, atol=1e-12)
    assert np.allclose(feet.position, x, atol=1e-12)
    assert feet.crossings > 0


@settings(max_examples=10, deadline=None)
@given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6), st.integers(1, 3))
def test_interpolation_reproduces_polynomials(dx, dy, p):
    mesh = _mesh()
    ops = StaggeredOperators(mesh, p)

    def f(x):
        return (0.3 + x[..., 0] - 2 * x[..., 1]) ** p + 0.5

    field = ops.project_function_main(f)
    disp = np.broadcast_to([dx, dy], (mesh.n_elements, ops.vol_rule.size, 2)).copy()
    feet = feet_from_displacement(ops, disp)
    vals = interpolate_at_feet(ops, field, feet)
    inside = ~feet.outside.reshape(feet.shape)
    target = feet.position.reshape(feet.shape + (2,))
    assert np.max(np.abs(vals[inside] - f(target[inside]))) < 1e-11


_MESH = {}


def _mesh():
    if "m" not in _MESH:
        _MESH["m"] = perturbed_rect(5, 5, seed=9)
    return _MESH["m"]


def test_constant_field_samples_constant(open_mesh):
    ops = StaggeredOperators(open_mesh, 2)
    rng = np.random.default_rng(0)
    disp = rng.uniform(-0.3, 0.3, (open_mesh.n_elements, ops.vol_rule.size, 2))
    feet = feet_from_displacement(ops, disp)
    vals = interpolate_at_feet(ops, np.full((open_mesh.n_elements, ops.n_phi), -4.0), feet)
    assert np.allclose(vals, -4.0, atol=1e-13)


def test_outside_value_uses_unclamped_target(open_mesh):
    ops = StaggeredOperators(open_mesh, 1)
    disp = np.zeros((open_mesh.n_elements, ops.vol_rule.size, 2))
    disp[..., 0] = -2.0
    feet = feet_from_displacement(ops, disp)
    assert feet.outside.all()
    vals = interpolate_at_feet(ops, ops.zeros_main(), feet, lambda x: x[:, 0])
    x = ops.gauss_points()
    assert np.allclose(vals, x[..., 0] - 2.0)


def test_foot_on_edge_uses_lower_cell():
    nodes, tris = generate_rect_mesh(0, 1, 0, 1, 2, 1)
    mesh = build_staggered_mesh(nodes, tris)
    ops = StaggeredOperators(mesh, 0)
    field = np.arange(mesh.n_elements, dtype=float)[:, None]
    j = np.nonzero(mesh.right_of >= 0)[0][0]
    mid = mesh.nodes[mesh.edges[j]].mean(axis=0)
    # move every point of the right triangle onto that shared edge midpoint
    r = mesh.right_of[j]
    disp = np.zeros((mesh.n_elements, ops.vol_rule.size, 2))
    disp[r] = mid - ops.gauss_points()[r]
    feet = feet_from_displacement(ops, disp)
    vals = interpolate_at_feet(ops, field, feet)
    assert np.all(vals[r] == min(mesh.left_of[j], r))


def test_zero_displacement_projection_is_identity(open_mesh):
    ops = StaggeredOperators(open_mesh, 3)
    c = np.random.default_rng(1).standard_normal((open_mesh.n_elements, ops.n_phi))
    feet = feet_from_displacement(ops, np.zeros((open_mesh.n_elements, ops.vol_rule.size, 2)))
    assert np.allclose(transported_projection(ops, c, feet), c, atol=1e-11)


@pytest.mark.parametrize("periodic", [(False, False), (True, True)])
def test_transported_projection_preserves_constants(periodic):
    mesh = perturbed_rect(6, 6, seed=4, periodic=periodic)
    ops = StaggeredOperators(mesh, 3)
    vel = ops.project_function_main(
        lambda x: np.stack([np.sin(2 * np.pi * x[..., 1]) + 0.3, np.cos(2 * np.pi * x[..., 0]) * x[..., 1]], -1)
    )
    feet = build_foot_table(ops, vel, 0.37)
    c = np.full((mesh.n_elements, ops.n_phi), 2.25)
    out = transported_projection(ops, c, feet, lambda x: np.full(len(x), 2.25))
    assert np.max(np.abs(out - 2.25)) < 1e-12
