"""Reference operators and matrix-free staggered DG operators.

Every element matrix is the product of a geometry scalar (or the inverse
Jacobian) and one of a small set of reference matrices indexed by the local
edge ``alpha`` and the side ``beta`` (0 = left, 1 = right) of the incidence.
Global applications loop over the six ``(alpha, beta)`` groups of
incidences and never store per-element matrices.

Shapes
------
Main fields are ``(N_e, N_phi)`` arrays, dual fields ``(N_d, N_psi)``; vector
fields carry a trailing axis of length 2.

Sign conventions
----------------
``D_ij = |G_j| n_j (x) D^L - A_ij J_i^{-T} . D^V`` with
``D^L = sigma_beta int_0^1 phi psi dtau`` and ``D^V = int grad_xi(phi) psi ds``;
``Q_ij = |G_j| n_j (x) Q^L - A_ij J_i^{-T} . Q^V`` with
``Q^L = -sigma_beta int_0^1 psi phi dtau`` and ``Q^V = -int psi grad_xi(phi) ds``.
``A_i = 2|T_i|`` and ``A_ij = 2|T_ij| = A_i / 3``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from .basis import (
    DualBasis,
    NodalBasis,
    QuadratureRule,
    dual_basis,
    edge_param,
    eval_dual_half,
    eval_main_basis,
    eval_main_grad,
    nodal_basis,
    quadrature,
    sub_triangle_map,
)
from .mesh import LEFT, RIGHT, StaggeredMesh

SIGMA = (1.0, -1.0)


def apply_left(m: np.ndarray, a: np.ndarray) -> np.ndarray:
    """``out[n, k, ...] = sum_l m[k, l] a[n, l, ...]`` as a single matrix product."""
    n, l = a.shape[:2]
    rest = a.shape[2:]
    flat = np.moveaxis(a.reshape(n, l, -1), 1, 0).reshape(l, -1)
    out = (m @ flat).reshape(m.shape[0], n, -1)
    return np.moveaxis(out, 0, 1).reshape((n, m.shape[0]) + rest)


@dataclass(frozen=True, eq=False)
class ReferenceOperatorSet:
    """Reference matrices shared by every element of a mesh.

    Line and volume arrays are indexed ``[alpha, beta, ...]``; volume
    operators carry the reference-gradient direction as the last axis.
    """

    degree: int
    mass_main_ref: np.ndarray  # (N_phi, N_phi)
    mass_dual_L: np.ndarray  # (N_psi, N_psi)
    mass_dual_R: np.ndarray
    div_line: np.ndarray  # (3, 2, N_phi, N_psi)
    div_vol: np.ndarray  # (3, 2, N_phi, N_psi, 2)
    grad_line: np.ndarray  # (3, 2, N_psi, N_phi)
    grad_vol: np.ndarray  # (3, 2, N_psi, N_phi, 2)
    coupling_ref: np.ndarray  # (3, 2, N_psi, N_phi)
    main_integral: np.ndarray  # (N_phi,)
    dual_integral: np.ndarray  # (2, N_psi)


def build_reference_operators(
    main: NodalBasis, dual: DualBasis, vol: QuadratureRule, seg: QuadratureRule
) -> ReferenceOperatorSet:
    """Integrate all reference matrices once with the given rules."""
    if main.degree != dual.degree:
        raise ValueError("main and dual bases must share the polynomial degree")
    nphi, npsi = main.size, dual.size
    s, w = vol.points, vol.weights
    tau, wt = seg.points, seg.weights

    phi = eval_main_basis(main, s)
    mass_main = np.einsum("g,gk,gl->kl", w, phi, phi)
    psi = [eval_dual_half(dual, side, s) for side in (LEFT, RIGHT)]
    mass_l = np.einsum("g,gk,gl->kl", w, psi[0], psi[0])
    mass_r = np.einsum("g,gk,gl->kl", w, psi[1], psi[1])

    div_line = np.empty((3, 2, nphi, npsi))
    div_vol = np.empty((3, 2, nphi, npsi, 2))
    grad_line = np.empty((3, 2, npsi, nphi))
    grad_vol = np.empty((3, 2, npsi, nphi, 2))
    coupling = np.empty((3, 2, npsi, nphi))
    for alpha in range(3):
        xi = sub_triangle_map(alpha, s)
        phi_a = eval_main_basis(main, xi)
        dphi_a = eval_main_grad(main, xi)
        for beta in (LEFT, RIGHT):
            ps = psi[beta]
            coupling[alpha, beta] = np.einsum("g,gk,gl->kl", w, ps, phi_a)
            div_vol[alpha, beta] = np.einsum("g,gkd,gl->kld", w, dphi_a, ps)
            grad_vol[alpha, beta] = -np.einsum("g,gk,gld->kld", w, ps, dphi_a)
            se = edge_param(beta, tau)
            phi_e = eval_main_basis(main, sub_triangle_map(alpha, se))
            psi_e = eval_dual_half(dual, beta, se)
            sg = SIGMA[beta]
            div_line[alpha, beta] = sg * np.einsum("q,qk,ql->kl", wt, phi_e, psi_e)
            grad_line[alpha, beta] = -sg * np.einsum("q,qk,ql->kl", wt, psi_e, phi_e)

    arrays = dict(
        mass_main_ref=mass_main,
        mass_dual_L=mass_l,
        mass_dual_R=mass_r,
        div_line=div_line,
        div_vol=div_vol,
        grad_line=grad_line,
        grad_vol=grad_vol,
        coupling_ref=coupling,
        main_integral=w @ phi,
        dual_integral=np.stack([w @ psi[0], w @ psi[1]]),
    )
    for a in arrays.values():
        a.setflags(write=False)
    return ReferenceOperatorSet(degree=main.degree, **arrays)


# ----------------------------------------------------------------------------
# single-incidence assembly (transient, used by tests and diagnostics)
# ----------------------------------------------------------------------------


def _incidence(mesh: StaggeredMesh, i: int, j: int):
    alpha = mesh.alpha_of(i, j)
    beta = int(mesh.side_of[i, alpha])
    a_ij = 2.0 * mesh.area_main[i] / 3.0
    ln = mesh.edge_length[j] * mesh.edge_normal[j]
    return alpha, beta, a_ij, ln, mesh.jacobian_inv[i]


def assemble_mass_main(mesh: StaggeredMesh, ref: ReferenceOperatorSet, i: int) -> np.ndarray:
    return 2.0 * mesh.area_main[i] * ref.mass_main_ref


def assemble_mass_dual(mesh: StaggeredMesh, ref: ReferenceOperatorSet, j: int) -> np.ndarray:
    """Dual mass matrix; boundary cells get identity padding on inactive indices."""
    m = (2.0 * mesh.area_main[mesh.left_of[j]] / 3.0) * ref.mass_dual_L
    r = mesh.right_of[j]
    if r >= 0:
        return m + (2.0 * mesh.area_main[r] / 3.0) * ref.mass_dual_R
    m = m.copy()
    inactive = np.abs(ref.mass_dual_L).sum(axis=1) == 0.0
    m[inactive, inactive] = 1.0
    return m


def assemble_divergence(mesh: StaggeredMesh, ref: ReferenceOperatorSet, i: int, j: int) -> np.ndarray:
    """``D_ij`` with shape ``(N_phi, N_psi, 2)``."""
    alpha, beta, a_ij, ln, jinv = _incidence(mesh, i, j)
    line = ref.div_line[alpha, beta][:, :, None] * ln
    vol = np.einsum("kld,de->kle", ref.div_vol[alpha, beta], jinv)
    return line - a_ij * vol


def assemble_gradient(mesh: StaggeredMesh, ref: ReferenceOperatorSet, i: int, j: int) -> np.ndarray:
    """``Q_ij`` with shape ``(N_psi, N_phi, 2)``."""
    alpha, beta, a_ij, ln, jinv = _incidence(mesh, i, j)
    line = ref.grad_line[alpha, beta][:, :, None] * ln
    vol = np.einsum("kld,de->kle", ref.grad_vol[alpha, beta], jinv)
    return line - a_ij * vol


def assemble_coupling(mesh: StaggeredMesh, ref: ReferenceOperatorSet, i: int, j: int) -> np.ndarray:
    """``U_ij = int_{T_ij} psi_k phi_l``, shape ``(N_psi, N_phi)``."""
    alpha, beta, a_ij, _, _ = _incidence(mesh, i, j)
    return a_ij * ref.coupling_ref[alpha, beta]


def assemble_source(mesh: StaggeredMesh, ref: ReferenceOperatorSet, j: int, g) -> np.ndarray:
    """``G_j = int_{R_j} psi_k g`` for a constant vector ``g``, shape ``(N_psi, 2)``."""
    integral = (2.0 * mesh.area_main[mesh.left_of[j]] / 3.0) * ref.dual_integral[LEFT]
    r = mesh.right_of[j]
    if r >= 0:
        integral = integral + (2.0 * mesh.area_main[r] / 3.0) * ref.dual_integral[RIGHT]
    return integral[:, None] * np.asarray(g, dtype=float)[None, :]


# ----------------------------------------------------------------------------
# global matrix-free operators
# ----------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _Group:
    """Incidences sharing local edge ``alpha`` and side ``beta``.

    ``geo[n, 0]`` is the scaled edge normal ``|G_j| n_j`` and ``geo[n, 1 + d]``
    the row ``-A_ij J_i^{-1}[d, :]``; the ``b_*`` matrices contract these
    factors with the reference line and volume operators in one product.
    """

    alpha: int
    beta: int
    tri: np.ndarray
    edge: np.ndarray
    geo: np.ndarray
    b_grad: np.ndarray
    b_div: np.ndarray
    b_divt: np.ndarray

    def factors(self, line_weight):
        if line_weight is None:
            return self.geo
        geo = self.geo.copy()
        geo[:, 0, :] *= line_weight[self.edge, None]
        return geo


class StaggeredOperators:
    """Matrix-free operators of degree ``p`` on a staggered mesh.

    Only the reference operators and per-element geometry scalars are kept.

    Parameters
    ----------
    mesh : StaggeredMesh
    p : int
        Polynomial degree, 0 to 4.
    """

    def __init__(self, mesh: StaggeredMesh, p: int):
        self.mesh = mesh
        self.p = p
        self.main = nodal_basis(p)
        self.dual = dual_basis(p)
        self.vol_rule = quadrature("triangle", 2 * p + 2)
        self.seg_rule = quadrature("segment", 2 * p + 1)
        self.ref = build_reference_operators(self.main, self.dual, self.vol_rule, self.seg_rule)
        self.n_phi = self.main.size
        self.n_psi = self.dual.size

        self.A = 2.0 * mesh.area_main
        self.A_sub = self.A / 3.0
        self.line_vec = mesh.edge_length[:, None] * mesh.edge_normal
        self.groups = []
        for alpha in range(3):
            for beta in (LEFT, RIGHT):
                tri = np.nonzero(mesh.side_of[:, alpha] == beta)[0]
                if tri.size:
                    self.groups.append(self._make_group(alpha, beta, tri))

        self._mass_main_inv = np.linalg.inv(self.ref.mass_main_ref)
        # simultaneous diagonalisation of the two dual reference mass matrices
        s = self.ref.mass_dual_L + self.ref.mass_dual_R
        mu, vec = eigh(self.ref.mass_dual_R, s)
        self._dual_mu = mu
        self._dual_vec = vec
        self.boundary = np.nonzero(mesh.right_of < 0)[0]
        self.inactive = self.dual.left_index < 0
        a_l = self.A_sub[mesh.left_of]
        a_r = np.where(mesh.right_of >= 0, self.A_sub[np.maximum(mesh.right_of, 0)], 0.0)
        self.A_left, self.A_right = a_l, a_r
        denom = a_l[:, None] * (1.0 - mu) + a_r[:, None] * mu
        null = np.zeros_like(denom, dtype=bool)
        n_null = int(self.inactive.sum())
        if n_null:
            null[self.boundary[:, None], np.arange(len(mu) - n_null, len(mu))[None, :]] = True
        with np.errstate(divide="ignore"):
            self._dual_inv_diag = np.where(null, 0.0, 1.0 / np.where(null, 1.0, denom))

        phi_g = eval_main_basis(self.main, self.vol_rule.points)
        self.phi_gauss = phi_g  # (N_g, N_phi)
        self._gauss_proj = self._mass_main_inv @ (phi_g * self.vol_rule.weights[:, None]).T

    def _make_group(self, alpha: int, beta: int, tri: np.ndarray) -> _Group:
        edge = self.mesh.edges_of[tri, alpha]
        geo = np.empty((len(tri), 3, 2))
        geo[:, 0, :] = self.line_vec[edge]
        geo[:, 1:, :] = -self.A_sub[tri, None, None] * self.mesh.jacobian_inv[tri]
        eye = np.eye(2)
        r = self.ref
        gm = np.concatenate([r.grad_line[alpha, beta][None], np.moveaxis(r.grad_vol[alpha, beta], -1, 0)])
        dm = np.concatenate([r.div_line[alpha, beta][None], np.moveaxis(r.div_vol[alpha, beta], -1, 0)])
        n_psi, n_phi = gm.shape[1], gm.shape[2]
        b_grad = np.einsum("mkl,fe->lmfke", gm, eye).reshape(n_phi * 6, n_psi * 2)
        b_div = np.einsum("mkl,e->lmek", dm, np.ones(2)).reshape(n_psi * 6, n_phi)
        b_divt = np.einsum("mkl,fe->kmfle", dm, eye).reshape(n_phi * 6, n_psi * 2)
        return _Group(alpha, beta, tri, edge, geo, b_grad, b_div, b_divt)

    # ---------------------------------------------------------------- shapes
    def zeros_main(self, *extra) -> np.ndarray:
        return np.zeros((self.mesh.n_elements, self.n_phi, *extra))

    def zeros_dual(self, *extra) -> np.ndarray:
        return np.zeros((self.mesh.n_edges, self.n_psi, *extra))

    # ---------------------------------------------------------------- mass
    def mass_main(self, c: np.ndarray) -> np.ndarray:
        out = apply_left(self.ref.mass_main_ref, c)
        return out * self.A.reshape((-1,) + (1,) * (c.ndim - 1))

    def solve_mass_main(self, r: np.ndarray) -> np.ndarray:
        out = apply_left(self._mass_main_inv, r)
        return out / self.A.reshape((-1,) + (1,) * (r.ndim - 1))

    def mass_dual(self, v: np.ndarray) -> np.ndarray:
        shape = (-1,) + (1,) * (v.ndim - 1)
        out = self.A_left.reshape(shape) * apply_left(self.ref.mass_dual_L, v)
        out += self.A_right.reshape(shape) * apply_left(self.ref.mass_dual_R, v)
        if self.boundary.size:
            b = self.boundary
            out[b[:, None], np.nonzero(self.inactive)[0][None, :]] = v[b][:, self.inactive]
        return out

    def solve_mass_dual(self, r: np.ndarray) -> np.ndarray:
        """Apply ``M_hat_j^{-1}`` to every dual cell.

        Inactive indices of boundary cells are passed through (identity padding).
        """
        v = self._dual_vec
        rr = r
        if self.boundary.size:
            rr = r.copy()
            rr[self.boundary[:, None], np.nonzero(self.inactive)[0][None, :]] = 0.0
        y = apply_left(v.T, rr)
        y *= self._dual_inv_diag.reshape(self._dual_inv_diag.shape + (1,) * (r.ndim - 2))
        out = apply_left(v, y)
        if self.boundary.size:
            b = self.boundary
            idx = np.nonzero(self.inactive)[0]
            out[b[:, None], idx[None, :]] = r[b[:, None], idx[None, :]]
        return out

    # ---------------------------------------------------------------- div / grad
    def divergence(self, v: np.ndarray, line_weight: np.ndarray | None = None) -> np.ndarray:
        """``sum_j D_ij v_j`` for a dual vector field ``v`` of shape ``(N_d, N_psi, 2)``.

        ``line_weight`` scales the edge term per edge (used to drop boundary
        fluxes for natural boundary conditions).
        """
        out = self.zeros_main()
        for g in self.groups:
            u = v[g.edge][:, :, None, :] * g.factors(line_weight)[:, None, :, :]
            out[g.tri] += u.reshape(len(u), -1) @ g.b_div
        return out

    def gradient_moments(self, c: np.ndarray, line_weight: np.ndarray | None = None) -> np.ndarray:
        """``sum_i Q_ij c_i`` for a main scalar field, shape ``(N_d, N_psi, 2)``."""
        out = self.zeros_dual(2)
        for g in self.groups:
            u = c[g.tri][:, :, None, None] * g.factors(line_weight)[:, None, :, :]
            out[g.edge] += (u.reshape(len(u), -1) @ g.b_grad).reshape(len(u), -1, 2)
        return out

    def divergence_transpose(self, v: np.ndarray, line_weight: np.ndarray | None = None) -> np.ndarray:
        """Apply ``D^T`` group by group (equals ``-Q``; used in symmetry checks)."""
        out = self.zeros_dual(2)
        for g in self.groups:
            u = v[g.tri][:, :, None, None] * g.factors(line_weight)[:, None, :, :]
            out[g.edge] += (u.reshape(len(u), -1) @ g.b_divt).reshape(len(u), -1, 2)
        return out

    # ---------------------------------------------------------------- coupling
    def coupling_to_dual(self, c: np.ndarray) -> np.ndarray:
        """``sum_{i in {l(j), r(j)}} U_ij c_i``."""
        out = self.zeros_dual(*c.shape[2:])
        for g in self.groups:
            u = self.ref.coupling_ref[g.alpha, g.beta]
            out[g.edge] += self.A_sub[g.tri].reshape((-1,) + (1,) * (c.ndim - 1)) * apply_left(
                u, c[g.tri]
            )
        return out

    def coupling_to_main(self, v: np.ndarray) -> np.ndarray:
        """``sum_{j in S_i} U_ij^T v_j``."""
        out = self.zeros_main(*v.shape[2:])
        for g in self.groups:
            u = self.ref.coupling_ref[g.alpha, g.beta]
            out[g.tri] += self.A_sub[g.tri].reshape((-1,) + (1,) * (v.ndim - 1)) * apply_left(
                u.T, v[g.edge]
            )
        return out

    def project_main_to_dual(self, c: np.ndarray) -> np.ndarray:
        return self.solve_mass_dual(self.coupling_to_dual(c))

    def project_dual_to_main(self, v: np.ndarray) -> np.ndarray:
        return self.solve_mass_main(self.coupling_to_main(v))

    def source_moments(self, g) -> np.ndarray:
        """``G_j`` for a constant vector ``g`` on every dual cell."""
        integral = self.A_left[:, None] * self.ref.dual_integral[LEFT]
        integral += self.A_right[:, None] * self.ref.dual_integral[RIGHT]
        return integral[:, :, None] * np.asarray(g, dtype=float)

    # ---------------------------------------------------------------- functions
    def gauss_points(self) -> np.ndarray:
        """Physical volume quadrature points, shape ``(N_e, N_g, 2)``."""
        x0 = self.mesh.nodes[self.mesh.triangles[:, 0]]
        return x0[:, None, :] + np.einsum("nij,gj->ngi", self.mesh.jacobian, self.vol_rule.points)

    def project_gauss_values(self, values: np.ndarray) -> np.ndarray:
        """L2 projection of values sampled at the volume Gauss points."""
        return apply_left(self._gauss_proj, values)

    def project_function_main(self, f) -> np.ndarray:
        """Element-wise L2 projection of ``f(x)`` (vectorised over points)."""
        return self.project_gauss_values(np.asarray(f(self.gauss_points())))

    def dual_quadrature(self):
        """Yield ``(group, x, weights, psi)`` for every sub-triangle group.

        ``x`` has shape ``(n, N_g, 2)`` in the owning triangle's frame.
        """
        s = self.vol_rule.points
        x0 = self.mesh.nodes[self.mesh.triangles[:, 0]]
        for g in self.groups:
            xi = sub_triangle_map(g.alpha, s)
            x = x0[g.tri, None, :] + np.einsum("nij,gj->ngi", self.mesh.jacobian[g.tri], xi)
            w = self.A_sub[g.tri, None] * self.vol_rule.weights[None, :]
            yield g, x, w, eval_dual_half(self.dual, g.beta, s)

    def dual_moments(self, f) -> np.ndarray:
        """``int_{R_j} psi_k f`` for a callable ``f`` returning ``(..., m)`` or scalars."""
        out = None
        for g, x, w, psi in self.dual_quadrature():
            val = np.asarray(f(x), dtype=float)
            contrib = np.einsum("ng,gk,ng...->nk...", w, psi, val)
            if out is None:
                out = self.zeros_dual(*val.shape[2:])
            out[g.edge] += contrib
        return out

    def project_function_dual(self, f) -> np.ndarray:
        return self.solve_mass_dual(self.dual_moments(f))

    def dirichlet_lift(self, edges: np.ndarray, g) -> np.ndarray:
        """``int_{G_j} psi_k g n_j ds`` on the given boundary edges."""
        out = self.zeros_dual(2)
        if len(edges) == 0:
            return out
        tau, wt = self.seg_rule.points, self.seg_rule.weights
        a = self.mesh.nodes[self.mesh.edges[edges, 0]]
        b = self.mesh.nodes[self.mesh.edges[edges, 1]]
        x = a[:, None, :] + tau[None, :, None] * (b - a)[:, None, :]
        gv = np.asarray(g(x), dtype=float)
        psi = eval_dual_half(self.dual, LEFT, edge_param(LEFT, tau))
        m = np.einsum("q,qk,nq->nk", wt, psi, gv)
        out[edges] = m[:, :, None] * self.line_vec[edges][:, None, :]
        return out

    def main_values(self, c: np.ndarray, cells: np.ndarray, xi: np.ndarray) -> np.ndarray:
        """Evaluate a main field at reference points ``xi`` of cells ``cells``."""
        phi = eval_main_basis(self.main, xi)
        return np.einsum("nk,nk...->n...", phi, c[cells])

    def integrate_main(self, c: np.ndarray) -> np.ndarray:
        return np.einsum("k,nk...,n->...", self.ref.main_integral, c, self.A)

    def mean_main(self, c: np.ndarray) -> np.ndarray:
        return self.integrate_main(c) / self.mesh.area_main.sum()


def discrete_divergence(ops: StaggeredOperators, v: np.ndarray) -> np.ndarray:
    """Divergence field ``M_bar^{-1} sum_j D_ij v_j`` on the main grid."""
    return ops.solve_mass_main(ops.divergence(v))


def discrete_gradient(ops: StaggeredOperators, c: np.ndarray) -> np.ndarray:
    """Gradient field ``M_hat^{-1} sum_i Q_ij c_i`` on the dual grid."""
    return ops.solve_mass_dual(ops.gradient_moments(c))


def project_main_to_dual(ops: StaggeredOperators, c: np.ndarray) -> np.ndarray:
    return ops.project_main_to_dual(c)


def project_dual_to_main(ops: StaggeredOperators, v: np.ndarray) -> np.ndarray:
    return ops.project_dual_to_main(v)
