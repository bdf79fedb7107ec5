"""Matrix-free conjugate gradient and the two symmetric implicit operators."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .operators import StaggeredOperators

DEFAULT_TOL = 1e-10


class SolverError(RuntimeError):
    """A linear solve failed to reach its tolerance."""

    def __init__(self, message: str, report: "LinearSolveReport"):
        super().__init__(message)
        self.report = report


@dataclass
class LinearSolveReport:
    iterations: int
    residual: float
    converged: bool
    history: list[float] = field(default_factory=list, repr=False)


def dot(a: np.ndarray, b: np.ndarray) -> float:
    """Inner product with numpy's pairwise summation (fixed reduction order)."""
    return float(np.sum(a * b))


def cg_solve(
    apply: Callable[[np.ndarray], np.ndarray],
    rhs: np.ndarray,
    x0: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    maxit: int | None = None,
    precond: Callable[[np.ndarray], np.ndarray] | None = None,
    nullspace: Callable[[np.ndarray], np.ndarray] | None = None,
    callback: Callable[[np.ndarray], None] | None = None,
) -> tuple[np.ndarray, LinearSolveReport]:
    """Preconditioned conjugate gradient on arrays of any shape.

    Parameters
    ----------
    apply : callable
        Symmetric positive (semi-)definite operator.
    rhs : ndarray
    x0 : ndarray, optional
        Initial guess, zero by default.
    tol : float
        Relative residual ``||b - A x|| / ||b||`` at which to stop.
    maxit : int, optional
        Defaults to ``10 * rhs.size``.
    precond : callable, optional
        Symmetric positive definite preconditioner ``z = M^{-1} r``.
    nullspace : callable, optional
        Projection removing the operator's nullspace from residuals; makes
        compatible singular systems solvable.
    callback : callable, optional
        Called with the current iterate after every iteration.

    Returns
    -------
    x : ndarray
    report : LinearSolveReport
    """
    b = np.asarray(rhs, dtype=float)
    if nullspace is not None:
        b = nullspace(b)
    maxit = 10 * b.size if maxit is None else maxit
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float, copy=True)
    bnorm = np.sqrt(dot(b, b))
    if bnorm == 0.0:
        return np.zeros_like(b), LinearSolveReport(0, 0.0, True, [0.0])
    r = b - apply(x) if x0 is not None else b.copy()
    if nullspace is not None:
        r = nullspace(r)
    res = np.sqrt(dot(r, r)) / bnorm
    history = [res]
    if res <= tol:
        return x, LinearSolveReport(0, res, True, history)
    z = precond(r) if precond is not None else r
    d = z.copy()
    rz = dot(r, z)
    it = 0
    for it in range(1, maxit + 1):
        q = apply(d)
        dq = dot(d, q)
        if dq <= 0.0:
            break
        a = rz / dq
        x += a * d
        r -= a * q
        if nullspace is not None:
            r = nullspace(r)
        res = np.sqrt(dot(r, r)) / bnorm
        history.append(res)
        if callback is not None:
            callback(x)
        if res <= tol:
            break
        z = precond(r) if precond is not None else r
        rz_new = dot(r, z)
        d = z + (rz_new / rz) * d
        rz = rz_new
    return x, LinearSolveReport(it, res, res <= tol, history)


def wall_projector(ops: StaggeredOperators, wall_edges: np.ndarray):
    """Return ``P(v)`` removing the normal component on the given edges."""
    n = ops.mesh.edge_normal[wall_edges]

    def project(v: np.ndarray) -> np.ndarray:
        if len(wall_edges) == 0:
            return v
        out = v.copy()
        vn = np.einsum("nke,ne->nk", v[wall_edges], n)
        out[wall_edges] -= vn[:, :, None] * n[:, None, :]
        return out

    return project


def diffusion_operator_apply(
    ops: StaggeredOperators,
    kappa: float,
    lam: float,
    c: np.ndarray,
    line_weight: np.ndarray | None = None,
) -> np.ndarray:
    """``(M_bar + kappa lam sum_j Q^T M_hat^{-1} Q) c`` for a main field.

    ``line_weight`` zeroes the edge term on natural (no-flux) boundary edges;
    Dirichlet edges keep it and receive their data through the right-hand side.
    """
    out = ops.mass_main(c)
    if kappa != 0.0 and lam != 0.0:
        if c.ndim > 2:
            # vector fields diffuse component by component
            for k in range(c.shape[-1]):
                out[..., k] = diffusion_operator_apply(ops, kappa, lam, c[..., k], line_weight)
            return out
        g = ops.solve_mass_dual(ops.gradient_moments(c, line_weight))
        out -= (kappa * lam) * ops.divergence(g, line_weight)
    return out


def pressure_operator_apply(ops: StaggeredOperators, p: np.ndarray, wall=None) -> np.ndarray:
    """``sum_j Q^T P M_hat^{-1} Q p``; positive semi-definite with constants in the kernel.

    ``wall`` is an optional projector zeroing normal velocity on slip walls.
    """
    g = ops.solve_mass_dual(ops.gradient_moments(p))
    if wall is not None:
        g = wall(g)
    return -ops.divergence(g)


def constant_nullspace(r: np.ndarray) -> np.ndarray:
    """Remove the component along the all-ones coefficient vector."""
    return r - np.mean(r)


class DiffusionSolver:
    """Solve ``(M_bar + kappa lam K) c = rhs`` by block-Jacobi preconditioned CG."""

    def __init__(self, ops: StaggeredOperators, line_weight=None, tol=DEFAULT_TOL, maxit=None):
        self.ops = ops
        self.line_weight = line_weight
        self.tol = tol
        self.maxit = maxit
        self.calls = 0

    def solve(self, kappa: float, lam: float, rhs: np.ndarray, x0=None):
        self.calls += 1
        ops = self.ops
        x, rep = cg_solve(
            lambda c: diffusion_operator_apply(ops, kappa, lam, c, self.line_weight),
            rhs,
            x0=x0,
            tol=self.tol,
            maxit=self.maxit,
            precond=ops.solve_mass_main,
        )
        if not rep.converged:
            raise SolverError(
                f"diffusion CG stalled at residual {rep.residual:.3e} after {rep.iterations} iterations",
                rep,
            )
        return x, rep


class PressureSolver:
    """Solve the pressure system ``K p = rhs`` (unpreconditioned CG)."""

    def __init__(self, ops: StaggeredOperators, wall=None, singular=True, tol=DEFAULT_TOL, maxit=None):
        self.ops = ops
        self.wall = wall
        self.singular = singular
        self.tol = tol
        self.maxit = maxit
        self.calls = 0

    def solve(self, rhs: np.ndarray, x0=None, tol=None):
        self.calls += 1
        ops = self.ops
        x, rep = cg_solve(
            lambda p: pressure_operator_apply(ops, p, self.wall),
            rhs,
            x0=x0,
            tol=self.tol if tol is None else tol,
            maxit=self.maxit,
            nullspace=constant_nullspace if self.singular else None,
        )
        if not rep.converged:
            raise SolverError(
                f"pressure CG stalled at residual {rep.residual:.3e} after {rep.iterations} iterations",
                rep,
            )
        if self.singular:
            x = x - ops.mean_main(x)
        return x, rep
