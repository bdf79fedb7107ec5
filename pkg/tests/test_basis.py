import itertools
from math import factorial

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from staggdg.basis import (
    dual_basis,
    edge_map,
    eval_dual_basis,
    eval_dual_half,
    eval_main_basis,
    eval_main_grad,
    inverse_map_dual,
    inverse_map_main,
    map_dual,
    map_main,
    nodal_basis,
    quadrature,
)
from staggdg.mesh import LEFT, RIGHT

ref_points = st.tuples(st.floats(0, 1), st.floats(0, 1)).filter(lambda p: p[0] + p[1] <= 1)


@pytest.mark.parametrize("p", range(5))
def test_nodal_property(p):
    b = nodal_basis(p)
    assert np.allclose(eval_main_basis(b, b.nodes), np.eye(b.size), atol=1e-12)
    assert b.size == (p + 1) * (p + 2) // 2


@settings(max_examples=30, deadline=None)
@given(ref_points, st.integers(0, 4))
def test_partition_of_unity(xi, p):
    b = nodal_basis(p)
    assert eval_main_basis(b, np.array(xi)).sum() == pytest.approx(1.0, abs=1e-12)
    assert np.allclose(eval_main_grad(b, np.array(xi)).sum(axis=0), 0.0, atol=1e-10)


def test_p1_values_and_gradients():
    b = nodal_basis(1)
    assert np.allclose(eval_main_basis(b, [0.0, 0.0]), [1, 0, 0])
    grads = eval_main_grad(b, [0.3, 0.2])
    assert np.allclose(grads, [[-1, -1], [1, 0], [0, 1]])


def test_p2_against_lagrange_oracle():
    # classic P2 shape functions on vertices (0,0),(1,0),(0,1) and midpoints
    def oracle(x, y):
        l0, l1, l2 = 1 - x - y, x, y
        return {
            (0.0, 0.0): l0 * (2 * l0 - 1),
            (1.0, 0.0): l1 * (2 * l1 - 1),
            (0.0, 1.0): l2 * (2 * l2 - 1),
            (0.5, 0.0): 4 * l0 * l1,
            (0.5, 0.5): 4 * l1 * l2,
            (0.0, 0.5): 4 * l0 * l2,
        }

    b = nodal_basis(2)
    rng = np.random.default_rng(0)
    for _ in range(5):
        x, y = rng.dirichlet([1, 1, 1])[:2]
        vals = eval_main_basis(b, [x, y])
        ref = oracle(x, y)
        for k, node in enumerate(b.nodes):
            assert vals[k] == pytest.approx(ref[tuple(node)], abs=1e-13)


def test_p3_gradient_finite_differences():
    b = nodal_basis(3)
    xi = np.array([0.21, 0.33])
    h = 1e-6
    fd = np.stack(
        [
            (eval_main_basis(b, xi + [h, 0]) - eval_main_basis(b, xi - [h, 0])) / (2 * h),
            (eval_main_basis(b, xi + [0, h]) - eval_main_basis(b, xi - [0, h])) / (2 * h),
        ],
        axis=-1,
    )
    assert np.allclose(eval_main_grad(b, xi), fd, atol=1e-7)


def test_degree_out_of_range():
    with pytest.raises(ValueError):
        nodal_basis(5)


def test_dual_p1_corner_values():
    d = dual_basis(1)
    assert np.allclose(eval_dual_basis(d, [0.0, 0.0]), [1, 0, 0, 0])
    assert np.allclose(eval_dual_basis(d, [1.0, 1.0]), [0, 0, 0, 1])


@pytest.mark.parametrize("p", range(5))
def test_dual_size_and_nodal(p):
    d = dual_basis(p)
    assert d.size == (p + 1) ** 2
    if p > 0:
        assert np.allclose(eval_dual_basis(d, d.nodes), np.eye(d.size), atol=1e-12)


@pytest.mark.parametrize("p", range(1, 5))
def test_dual_continuity_on_diagonal(p):
    d = dual_basis(p)
    t = np.linspace(0, 1, 11)
    diag = np.stack([t, 1 - t], axis=1)
    left = eval_dual_half(d, LEFT, diag)
    right = eval_dual_half(d, RIGHT, 1 - diag)
    assert np.allclose(left, right, atol=1e-13)


@pytest.mark.parametrize("p", range(1, 5))
def test_dual_halves_are_main_functions(p):
    d = dual_basis(p)
    rng = np.random.default_rng(p)
    z = rng.dirichlet([1, 1, 1], 8)[:, :2]
    phi = eval_main_basis(d.main, z)
    psi_left = eval_dual_basis(d, z)
    for k in range(d.size):
        expect = phi[:, d.left_index[k]] if d.left_index[k] >= 0 else 0.0
        assert np.allclose(psi_left[:, k], expect)
    zr = 1 - z
    psi_right = eval_dual_basis(d, zr)
    for k in range(d.size):
        expect = phi[:, d.right_index[k]] if d.right_index[k] >= 0 else 0.0
        assert np.allclose(psi_right[:, k], expect)


def test_main_map_roundtrip(open_mesh):
    m = open_mesh
    rng = np.random.default_rng(1)
    for i in range(0, m.n_elements, 7):
        v = m.vertices(i)
        assert np.allclose(map_main(m, i, [0.0, 0.0]), v[0])
        assert np.allclose(map_main(m, i, [1 / 3, 1 / 3]), m.centroid[i])
        lam = rng.dirichlet([1, 1, 1])
        x = lam @ v
        assert np.allclose(map_main(m, i, inverse_map_main(m, i, x)), x, atol=1e-13)


def test_dual_map_properties(open_mesh):
    m = open_mesh
    for j in np.nonzero(m.right_of >= 0)[0][:6]:
        a, b = m.nodes[m.edges[j]]
        for side in (LEFT, RIGHT):
            for t in (0.0, 0.3, 1.0):
                x = map_dual(m, j, side, [t, 1 - t])
                if side == RIGHT:
                    x = x - m.edge_shift[j]
                # the diagonal lands on the edge
                cross = (b - a)[0] * (x - a)[1] - (b - a)[1] * (x - a)[0]
                assert abs(cross) < 1e-13
        assert np.allclose(map_dual(m, j, LEFT, [0, 0]), m.centroid[m.left_of[j]])
        corners = map_dual(m, j, LEFT, np.array([[0, 0], [1, 0], [0, 1]]))
        e1, e2 = corners[1] - corners[0], corners[2] - corners[0]
        area = 0.5 * abs(e1[0] * e2[1] - e1[1] * e2[0])
        assert area == pytest.approx(m.area_main[m.left_of[j]] / 3)
        x = map_dual(m, j, RIGHT, [0.7, 0.6])
        assert np.allclose(inverse_map_dual(m, j, RIGHT, x), [0.7, 0.6])


def test_edge_map(open_mesh):
    a, b = open_mesh.nodes[open_mesh.edges[4]]
    assert np.allclose(edge_map(open_mesh, 4, 0.0), a)
    assert np.allclose(edge_map(open_mesh, 4, 1.0), b)
    assert np.allclose(edge_map(open_mesh, 4, 0.5), 0.5 * (a + b))


def test_quadrature_basics():
    seg = quadrature("segment", 1)
    assert seg.size == 1 and seg.weights[0] == pytest.approx(1.0)
    tri = quadrature("triangle", 2)
    assert np.sum(tri.weights * tri.points[:, 0] * tri.points[:, 1]) == pytest.approx(1 / 24)
    assert tri.weights.sum() == pytest.approx(0.5)
    with pytest.raises(ValueError):
        quadrature("square", 2)


@pytest.mark.parametrize("n", [2, 5, 10])
def test_triangle_quadrature_exactness(n):
    rule = quadrature("triangle", n)
    for a, b in itertools.product(range(n + 1), repeat=2):
        if a + b > n:
            continue
        exact = factorial(a) * factorial(b) / factorial(a + b + 2)
        approx = np.sum(rule.weights * rule.points[:, 0] ** a * rule.points[:, 1] ** b)
        assert approx == pytest.approx(exact, rel=1e-12, abs=1e-15)
