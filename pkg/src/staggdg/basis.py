"""Nodal bases on the reference triangle, the C0 dual basis, maps and quadrature.

The reference triangle is ``T_ref = {(xi, eta): xi, eta >= 0, xi + eta <= 1}``.
The dual reference square ``[0, 1]^2`` is split along its anti-diagonal into a
left half ``zeta_1 + zeta_2 <= 1`` and a right half; on each half the dual
basis is a degree-``p`` Lagrange polynomial, and the two halves share the
nodes on the diagonal, which makes the basis continuous.

Sub-triangle parametrisation
----------------------------
The sub-triangle ``T_ij`` (edge ``j`` plus the centroid of triangle ``i``) is
parametrised by ``s`` in ``T_ref``. With ``alpha`` the local edge index and
``V_0, V_1, V_2`` the reference vertices,

    xi(s) = c + s_1 (V_alpha - c) + s_2 (V_{alpha+1} - c),   c = (1/3, 1/3).

The dual coordinate is ``zeta = s`` on the left triangle of the edge and
``zeta = 1 - s`` on the right triangle. Both sides see the edge node ``a``
(first node of the edge) at ``zeta = (1, 0)`` and ``b`` at ``zeta = (0, 1)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from math import ceil

import numpy as np
from scipy.special import roots_jacobi, roots_legendre

from .mesh import LEFT, RIGHT, StaggeredMesh

REF_VERTICES = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
REF_CENTROID = np.array([1.0, 1.0]) / 3.0


@dataclass(frozen=True, eq=False)
class NodalBasis:
    """Lagrange basis of total degree ``p`` on ``T_ref``.

    ``phi_k(xi) = sum_m coeffs[m, k] * xi**exponents[m, 0] * eta**exponents[m, 1]``.
    """

    degree: int
    nodes: np.ndarray
    exponents: np.ndarray
    coeffs: np.ndarray

    @property
    def size(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True, eq=False)
class DualBasis:
    """C0 basis on the split reference square.

    ``left_index[k]`` is the main-basis index that ``psi_k`` equals on the left
    half (``-1`` if ``psi_k`` vanishes there); ``right_index[k]`` is the index
    ``m`` with ``psi_k(zeta) = phi_m(1 - zeta)`` on the right half.
    """

    degree: int
    nodes: np.ndarray
    left_index: np.ndarray
    right_index: np.ndarray
    main: NodalBasis

    @property
    def size(self) -> int:
        return len(self.nodes)


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    points: np.ndarray
    weights: np.ndarray
    exactness: int

    @property
    def size(self) -> int:
        return len(self.weights)


def _lattice(p: int) -> np.ndarray:
    return np.array([(i, j) for j in range(p + 1) for i in range(p + 1 - j)], dtype=np.int64)


def _monomials(exponents: np.ndarray, xi: np.ndarray) -> np.ndarray:
    x = xi[..., 0, None]
    y = xi[..., 1, None]
    return x ** exponents[:, 0] * y ** exponents[:, 1]


@lru_cache(maxsize=None)
def nodal_basis(p: int) -> NodalBasis:
    """Equispaced Lagrange basis of degree ``p`` (0 <= p <= 4).

    Nodes are ``(i/p, j/p)`` with ``i + j <= p``, ordered by ``j`` then ``i``;
    for ``p = 0`` the single node is the centroid.
    """
    if not 0 <= p <= 4:
        raise ValueError(f"polynomial degree must lie in [0, 4], got {p}")
    exponents = _lattice(p)
    nodes = REF_CENTROID[None].copy() if p == 0 else exponents / float(p)
    vander = _monomials(exponents, nodes)
    coeffs = np.linalg.inv(vander)
    for a in (nodes, exponents, coeffs):
        a.setflags(write=False)
    return NodalBasis(p, nodes, exponents, coeffs)


@lru_cache(maxsize=None)
def dual_basis(p: int) -> DualBasis:
    """C0 dual basis of degree ``p`` with ``(p + 1)**2`` functions.

    The first ``N_phi`` nodes coincide with the main lattice (left half and
    diagonal); the remaining nodes are the strictly-right lattice points.
    """
    main = nodal_basis(p)
    if p == 0:
        nodes = np.array([[0.5, 0.5]])
        left = np.array([0])
        right = np.array([0])
    else:
        grid = [(i, j) for j in range(p + 1) for i in range(p + 1) if i + j <= p]
        grid += [(i, j) for j in range(p + 1) for i in range(p + 1) if i + j > p]
        lookup = {tuple(e): k for k, e in enumerate(_lattice(p).tolist())}
        left = np.array([lookup[(i, j)] if i + j <= p else -1 for i, j in grid])
        right = np.array([lookup[(p - i, p - j)] if i + j >= p else -1 for i, j in grid])
        nodes = np.array(grid, dtype=float) / p
    for a in (nodes, left, right):
        a.setflags(write=False)
    return DualBasis(p, nodes, left, right, main)


def eval_main_basis(basis: NodalBasis, xi) -> np.ndarray:
    """Values of all ``phi_k`` at reference points, shape ``(..., N_phi)``."""
    xi = np.asarray(xi, dtype=float)
    return _monomials(basis.exponents, xi) @ basis.coeffs


def eval_main_grad(basis: NodalBasis, xi) -> np.ndarray:
    """Reference gradients of all ``phi_k``, shape ``(..., N_phi, 2)``."""
    xi = np.asarray(xi, dtype=float)
    e = basis.exponents
    x = xi[..., 0, None]
    y = xi[..., 1, None]
    ex = np.maximum(e[:, 0] - 1, 0)
    ey = np.maximum(e[:, 1] - 1, 0)
    dx = e[:, 0] * x**ex * y ** e[:, 1]
    dy = e[:, 1] * x ** e[:, 0] * y**ey
    return np.stack([dx @ basis.coeffs, dy @ basis.coeffs], axis=-1)


def _gather(values: np.ndarray, index: np.ndarray) -> np.ndarray:
    out = values[..., np.maximum(index, 0)]
    out[..., index < 0] = 0.0
    return out


def eval_dual_half(basis: DualBasis, side: int, s) -> np.ndarray:
    """Dual basis on one half, in the sub-triangle parameter ``s``.

    ``side = LEFT`` evaluates at ``zeta = s``; ``side = RIGHT`` at ``zeta = 1 - s``.
    """
    phi = eval_main_basis(basis.main, s)
    index = basis.left_index if side == LEFT else basis.right_index
    return _gather(phi, index)


def eval_dual_basis(basis: DualBasis, zeta) -> np.ndarray:
    """Values of all ``psi_k`` at points of the reference square."""
    zeta = np.asarray(zeta, dtype=float)
    left = zeta[..., 0] + zeta[..., 1] <= 1.0
    out_l = eval_dual_half(basis, LEFT, zeta)
    out_r = eval_dual_half(basis, RIGHT, 1.0 - zeta)
    return np.where(left[..., None], out_l, out_r)


def sub_triangle_map(alpha: int, s) -> np.ndarray:
    """Main reference coordinates of sub-triangle ``alpha`` at parameter ``s``."""
    s = np.asarray(s, dtype=float)
    va = REF_VERTICES[alpha] - REF_CENTROID
    vb = REF_VERTICES[(alpha + 1) % 3] - REF_CENTROID
    return REF_CENTROID + s[..., 0, None] * va + s[..., 1, None] * vb


def edge_param(side: int, tau) -> np.ndarray:
    """Sub-triangle parameter ``s`` on the shared edge at edge coordinate ``tau``.

    ``tau = 0`` is the first edge node ``a``, ``tau = 1`` the second node ``b``.
    """
    tau = np.asarray(tau, dtype=float)
    if side == LEFT:
        return np.stack([1.0 - tau, tau], axis=-1)
    return np.stack([tau, 1.0 - tau], axis=-1)


# ----------------------------------------------------------------------------
# quadrature
# ----------------------------------------------------------------------------


@lru_cache(maxsize=None)
def quadrature(domain: str, exactness: int) -> QuadratureRule:
    """Gauss rule on ``"triangle"`` (``T_ref``) or ``"segment"`` (``[0, 1]``).

    The triangle rule is the collapsed (Duffy) product of Gauss-Jacobi points
    in ``eta`` with weight ``1 - eta`` and Gauss-Legendre points along the
    collapsed direction.
    """
    n = max(1, ceil((exactness + 1) / 2))
    if domain == "segment":
        x, w = roots_legendre(n)
        pts, wts = 0.5 * (x + 1.0), 0.5 * w
    elif domain == "triangle":
        xj, wj = roots_jacobi(n, 1.0, 0.0)
        xl, wl = roots_legendre(n)
        eta = 0.5 * (xj + 1.0)
        t = 0.5 * (xl + 1.0)
        E, T = np.meshgrid(eta, t, indexing="ij")
        WE, WT = np.meshgrid(0.25 * wj, 0.5 * wl, indexing="ij")
        pts = np.stack([((1.0 - E) * T).ravel(), E.ravel()], axis=1)
        wts = (WE * WT).ravel()
    else:
        raise ValueError(f"unknown quadrature domain {domain!r}")
    pts.setflags(write=False)
    wts.setflags(write=False)
    return QuadratureRule(pts, wts, exactness)


# ----------------------------------------------------------------------------
# maps between reference and physical space
# ----------------------------------------------------------------------------


def map_main(mesh: StaggeredMesh, i, xi) -> np.ndarray:
    """Physical position of reference point ``xi`` in triangle ``i``."""
    x0 = mesh.nodes[mesh.triangles[i, 0]]
    return x0 + np.einsum("...ij,...j->...i", mesh.jacobian[i], np.asarray(xi, dtype=float))


def inverse_map_main(mesh: StaggeredMesh, i, x) -> np.ndarray:
    x0 = mesh.nodes[mesh.triangles[i, 0]]
    return np.einsum("...ij,...j->...i", mesh.jacobian_inv[i], np.asarray(x, dtype=float) - x0)


def _dual_frame(mesh: StaggeredMesh, j: int, side: int):
    """Origin and spanning vectors of the map from ``s`` to physical space."""
    a, b = mesh.nodes[mesh.edges[j]]
    if side == LEFT:
        c = mesh.centroid[mesh.left_of[j]]
        return c, a - c, b - c
    r = mesh.right_of[j]
    if r < 0:
        raise ValueError(f"edge {j} is a boundary edge and has no right side")
    sh = mesh.edge_shift[j]
    c = mesh.centroid[r]
    return c, b + sh - c, a + sh - c


def map_dual(mesh: StaggeredMesh, j: int, side: int, zeta) -> np.ndarray:
    """Physical position of dual reference point ``zeta`` on one side of cell ``j``.

    The right side is returned in the frame of the right triangle.
    """
    zeta = np.asarray(zeta, dtype=float)
    s = zeta if side == LEFT else 1.0 - zeta
    c, u, v = _dual_frame(mesh, j, side)
    return c + s[..., 0, None] * u + s[..., 1, None] * v


def inverse_map_dual(mesh: StaggeredMesh, j: int, side: int, x) -> np.ndarray:
    c, u, v = _dual_frame(mesh, j, side)
    m = np.column_stack([u, v])
    s = np.einsum("ij,...j->...i", np.linalg.inv(m), np.asarray(x, dtype=float) - c)
    return s if side == LEFT else 1.0 - s


def edge_map(mesh: StaggeredMesh, j: int, tau) -> np.ndarray:
    """Point on edge ``j`` (left frame) at parameter ``tau`` from ``a`` to ``b``."""
    a, b = mesh.nodes[mesh.edges[j]]
    tau = np.asarray(tau, dtype=float)
    return a + tau[..., None] * (b - a)
