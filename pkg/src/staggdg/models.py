"""Physics models driven by :func:`staggdg.imex.imex_step`.

Two models are provided:

* :class:`AdvectionDiffusionModel` transports a main-grid scalar ``C`` with a
  prescribed velocity and diffuses it implicitly.
* :class:`NavierStokesModel` carries a dual-grid velocity, a main-grid
  pressure and optionally a main-grid temperature coupled through the
  Boussinesq buoyancy ``(1 - beta (theta - theta0)) g``.

Each stage solve returns the stage values on the main grid together with the
stage fluxes ``H = (q_s - q^I_s) / lam``, the discrete diffusion (plus
pressure and source terms) evaluated at the stage solution.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import pi, sqrt
from typing import Callable

import numpy as np
from scipy import sparse
from scipy.special import erf

from .basis import eval_main_grad
from .krylov import DEFAULT_TOL, DiffusionSolver, PressureSolver, wall_projector
from .mesh import SIDE_XMAX, SIDE_XMIN, SIDE_YMAX, SIDE_YMIN
from .operators import StaggeredOperators


@dataclass(frozen=True)
class ModelParams:
    """Physical coefficients; ``gravity`` acts along ``y`` and is signed."""

    nu: float = 0.0
    alpha: float = 0.0
    kappa: float = 0.0
    beta: float = 0.0
    gravity: float = 0.0
    theta0: float = 0.0

    def __post_init__(self):
        for name in ("nu", "alpha", "kappa"):
            if getattr(self, name) < 0.0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class PhysicsState:
    """Fields at time ``t``; unused fields stay ``None``."""

    t: float
    C: np.ndarray | None = None
    v: np.ndarray | None = None
    p: np.ndarray | None = None
    theta: np.ndarray | None = None

    def copy(self) -> "PhysicsState":
        def c(a):
            return None if a is None else a.copy()

        return PhysicsState(self.t, c(self.C), c(self.v), c(self.p), c(self.theta))


def boundary_edges(ops: StaggeredOperators, sides) -> np.ndarray:
    """Indices of boundary edges lying on any of the given sides."""
    bs = ops.mesh.boundary_side
    mask = np.isin(bs, list(sides)) & (ops.mesh.right_of < 0)
    return np.nonzero(mask)[0]


def line_weights(ops: StaggeredOperators, dirichlet_edges) -> np.ndarray:
    """1 on interior and Dirichlet edges, 0 on natural (no-flux) boundary edges."""
    w = np.where(ops.mesh.right_of >= 0, 1.0, 0.0)
    w[np.asarray(dirichlet_edges, dtype=np.int64)] = 1.0
    return w


def divergence_residual(ops: StaggeredOperators, v: np.ndarray) -> float:
    """Coefficient 2-norm of ``sum_j D_ij v_j`` over all main elements."""
    return float(np.sqrt(np.sum(ops.divergence(v) ** 2)))


def divergence_scale(ops: StaggeredOperators, v: np.ndarray) -> float:
    """Velocity scale matching :func:`divergence_residual`.

    The coefficient norm of ``v`` times the largest edge length bounds the
    size of the individual line and volume contributions to the divergence.
    """
    return float(np.sqrt(np.sum(v**2)) * ops.mesh.edge_length.max())


def element_vorticity(ops: StaggeredOperators, v: np.ndarray) -> np.ndarray:
    """``dv/dx - du/dy`` of the main-grid projection of ``v`` at each centroid."""
    mesh = ops.mesh
    vbar = ops.project_dual_to_main(v)
    gref = eval_main_grad(ops.main, np.array([1.0 / 3.0, 1.0 / 3.0]))  # (N_phi, 2)
    grad = np.einsum("kd,nde->nke", gref, mesh.jacobian_inv)  # (N_e, N_phi, 2)
    dvdx = np.einsum("nk,nk->n", vbar[:, :, 1], grad[:, :, 0])
    dudy = np.einsum("nk,nk->n", vbar[:, :, 0], grad[:, :, 1])
    return dvdx - dudy


def count_local_extrema(mesh, values: np.ndarray, rel_threshold: float = 0.1) -> int:
    """Elements whose value is a strict maximum or minimum over all elements sharing a vertex.

    Only values with ``|value| > rel_threshold * max|value|`` count.
    """
    values = np.asarray(values, dtype=float)
    ne = mesh.n_elements
    tri = mesh.triangles
    inc = sparse.csr_matrix((np.ones(tri.size), (np.repeat(np.arange(ne), 3), tri.ravel())), shape=(ne, tri.max() + 1))
    adj = (inc @ inc.T).tocoo()
    off = adj.row != adj.col
    a, b = adj.row[off], adj.col[off]
    is_max = np.ones(ne, dtype=bool)
    is_min = np.ones(ne, dtype=bool)
    np.logical_and.at(is_max, a, values[a] > values[b])
    np.logical_and.at(is_min, a, values[a] < values[b])
    big = np.abs(values) > rel_threshold * np.abs(values).max()
    return int(np.sum((is_max | is_min) & big))


# ----------------------------------------------------------------------------
# stage solves
# ----------------------------------------------------------------------------


def stage_solve_advdiff(ops, solver: DiffusionSolver, kappa: float, lam: float, rhs, lift=None):
    """Implicit diffusion ``(M_bar + kappa lam K) C* = M_bar rhs (+ lift term)``.

    ``lift`` holds the Dirichlet edge moments; the flux returned is
    ``(C* - rhs) / lam``.

    Returns
    -------
    C_star, flux, report
    """
    if lam <= 0.0:
        raise ValueError("stage weight must be positive")
    if kappa == 0.0:
        return rhs.copy(), np.zeros_like(rhs), None
    b = ops.mass_main(rhs)
    if lift is not None:
        b = b + (kappa * lam) * ops.divergence(ops.solve_mass_dual(lift), solver.line_weight)
    c, rep = solver.solve(kappa, lam, b, x0=rhs)
    return c, (c - rhs) / lam, rep


def stage_solve_temperature(ops, solver: DiffusionSolver, alpha: float, lam: float, rhs):
    """Temperature diffusion with natural boundaries; same path as :func:`stage_solve_advdiff`."""
    return stage_solve_advdiff(ops, solver, alpha, lam, rhs)


def _solve_components(ops, solver: DiffusionSolver, kappa, lam, rhs):
    if kappa == 0.0:
        return rhs.copy(), None
    c, rep = solver.solve(kappa, lam, ops.mass_main(rhs), x0=rhs)
    return c, rep


PROJECTION_PASSES = 4


def stage_solve_momentum(model: "NavierStokesModel", lam: float, rhs_v: np.ndarray, theta_star, t: float):
    """Fractional step: component diffusion, pressure projection, velocity correction.

    Parameters
    ----------
    rhs_v : ndarray, shape (N_e, N_phi, 2)
        Transported main-grid velocity of the stage.
    theta_star : ndarray or None
        Stage temperature entering the buoyancy.

    Returns
    -------
    v_hat, p, reports
    """
    ops = model.ops
    prm = model.params
    reports = {}
    vbar, rep = _solve_components(ops, model.vel_solver, prm.nu, lam, rhs_v)
    reports["diffusion"] = rep
    v_star = model.wall(ops.project_main_to_dual(vbar))
    forcing = model.forcing_moments(theta_star, t)
    s_dual = model.wall(ops.solve_mass_dual(forcing))
    rhs_p = -ops.divergence(v_star / lam + s_dual)
    p, rep = model.p_solver.solve(rhs_p, x0=model.last_p)
    v_hat = _correct_velocity(model, lam, v_star, s_dual, p)
    # the CG test is relative to rhs_p, which hydrostatic forcing can make much
    # larger than the flow; tighten until the divergence meets the velocity bound
    iterations = rep.iterations
    for _ in range(PROJECTION_PASSES):
        target = model.p_solver.tol * divergence_scale(ops, v_hat)
        div = divergence_residual(ops, v_hat)
        if div <= target or rep.residual == 0.0:
            break
        tol = max(0.5 * rep.residual * target / div, 1e-14)
        p, rep = model.p_solver.solve(rhs_p, x0=p, tol=tol)
        iterations += rep.iterations
        v_hat = _correct_velocity(model, lam, v_star, s_dual, p)
    rep.iterations = iterations
    reports["pressure"] = rep
    return v_hat, p, reports


def _correct_velocity(model, lam, v_star, s_dual, p):
    ops = model.ops
    grad_p = model.wall(ops.solve_mass_dual(ops.gradient_moments(p)))
    return v_star + lam * (s_dual - grad_p)


# ----------------------------------------------------------------------------
# models
# ----------------------------------------------------------------------------


class AdvectionDiffusionModel:
    """Scalar transport by a prescribed velocity with implicit diffusion.

    Parameters
    ----------
    ops : StaggeredOperators
    kappa : float
        Diffusion coefficient.
    velocity : callable
        ``velocity(x, t)`` returning ``(..., 2)``.
    dirichlet_sides : iterable of int
        Boundary sides carrying Dirichlet data; other boundary sides are
        natural (zero flux).
    boundary_value : callable, optional
        ``g(x, t)`` for Dirichlet edges and for feet leaving the domain.
    steady_velocity : bool
        Project the velocity once instead of at every stage time.
    """

    velocity_field = "prescribed"

    def __init__(
        self,
        ops: StaggeredOperators,
        kappa: float,
        velocity: Callable,
        dirichlet_sides=(),
        boundary_value: Callable | None = None,
        steady_velocity: bool = True,
        cg_tol: float = DEFAULT_TOL,
        cg_maxit: int | None = None,
    ):
        if kappa < 0.0:
            raise ValueError("kappa must be non-negative")
        self.ops = ops
        self.kappa = kappa
        self.velocity = velocity
        self.boundary_value = boundary_value
        self.steady_velocity = steady_velocity
        self.dirichlet = boundary_edges(ops, dirichlet_sides)
        if len(self.dirichlet) and boundary_value is None:
            raise ValueError("Dirichlet sides need a boundary_value callable")
        self.solver = DiffusionSolver(ops, line_weights(ops, self.dirichlet), cg_tol, cg_maxit)
        self._vel_cache = None

    def initial_state(self, c0: Callable, t0: float = 0.0) -> PhysicsState:
        return PhysicsState(t0, C=self.ops.project_function_main(lambda x: c0(x, t0)))

    def transported(self, state: PhysicsState) -> dict:
        return {"C": state.C}

    def prescribed_velocity(self, t: float) -> np.ndarray:
        if self.steady_velocity:
            if self._vel_cache is None:
                self._vel_cache = self.ops.project_function_main(lambda x: self.velocity(x, 0.0))
            return self._vel_cache
        return self.ops.project_function_main(lambda x: self.velocity(x, t))

    def outside_values(self, t: float) -> dict:
        if self.boundary_value is None:
            return {}
        g = self.boundary_value
        return {"C": lambda x: g(x, t)}

    def stage_solve(self, s: int, t: float, lam: float, rhs: dict):
        lift = None
        if len(self.dirichlet) and self.kappa != 0.0:
            lift = self.ops.dirichlet_lift(self.dirichlet, lambda x: self.boundary_value(x, t))
        c, flux, rep = stage_solve_advdiff(self.ops, self.solver, self.kappa, lam, rhs["C"], lift)
        info = {"diffusion": [rep.iterations] if rep is not None else [0]}
        return {"C": c}, {"C": flux}, info

    def finalize(self, state, values, t, combined=False) -> PhysicsState:
        return PhysicsState(t, C=values["C"])


class NavierStokesModel:
    """Incompressible flow on the dual grid with optional Boussinesq temperature.

    Parameters
    ----------
    ops : StaggeredOperators
    params : ModelParams
    temperature : bool
        Carry and diffuse ``theta`` and add its buoyancy.
    wall_sides : iterable of int
        Non-periodic sides treated as slip walls.
    source : callable, optional
        Extra momentum source ``S(x, t)`` returning ``(..., 2)``.
    """

    velocity_field = "vel"

    def __init__(
        self,
        ops: StaggeredOperators,
        params: ModelParams,
        temperature: bool = False,
        wall_sides=(SIDE_XMIN, SIDE_XMAX, SIDE_YMIN, SIDE_YMAX),
        source: Callable | None = None,
        cg_tol: float = DEFAULT_TOL,
        cg_maxit: int | None = None,
    ):
        self.ops = ops
        self.params = params
        self.temperature = temperature
        self.source = source
        self.walls = boundary_edges(ops, wall_sides)
        self.wall = wall_projector(ops, self.walls)
        natural = line_weights(ops, [])
        self.vel_solver = DiffusionSolver(ops, natural, cg_tol, cg_maxit)
        self.theta_solver = DiffusionSolver(ops, natural, cg_tol, cg_maxit)
        self.p_solver = PressureSolver(ops, self.wall, True, cg_tol, cg_maxit)
        self.last_p = None
        self._last_v = None
        self._last_p = None
        self.last_divergence = 0.0
        self.last_scale = 0.0

    # ---------------------------------------------------------------- setup
    def initial_state(self, velocity: Callable, theta: Callable | None = None, pressure=None, t0=0.0):
        """L2-project initial fields; the velocity is made discretely divergence-free."""
        ops = self.ops
        v = self.wall(ops.project_function_dual(lambda x: velocity(x, t0)))
        v = self.project_divergence_free(v)
        th = None
        if self.temperature:
            th = ops.project_function_main(lambda x: theta(x, t0)) if theta else ops.zeros_main()
        p = ops.project_function_main(lambda x: pressure(x, t0)) if pressure else ops.zeros_main()
        self.last_p = p.copy()
        return PhysicsState(t0, v=v, p=p, theta=th)

    def project_divergence_free(self, v: np.ndarray) -> np.ndarray:
        """Remove the discrete gradient part: ``v - P M_hat^{-1} Q phi`` with ``K phi = -D v``."""
        ops = self.ops
        phi, _ = self.p_solver.solve(-ops.divergence(v))
        return v - self.wall(ops.solve_mass_dual(ops.gradient_moments(phi)))

    # ---------------------------------------------------------------- protocol
    def transported(self, state: PhysicsState) -> dict:
        out = {"vel": self.ops.project_dual_to_main(state.v)}
        if self.temperature:
            out["theta"] = state.theta
        return out

    def outside_values(self, t: float) -> dict:
        return {}

    def forcing_moments(self, theta_star, t: float) -> np.ndarray:
        """Dual moments of gravity, buoyancy and the optional source."""
        ops = self.ops
        prm = self.params
        out = ops.source_moments((0.0, prm.gravity))
        if self.temperature and prm.beta != 0.0 and prm.gravity != 0.0:
            dth = ops.coupling_to_dual(theta_star - prm.theta0)
            out[:, :, 1] -= prm.beta * prm.gravity * dth
        if self.source is not None:
            out = out + ops.dual_moments(lambda x: self.source(x, t))
        return out

    def stage_solve(self, s: int, t: float, lam: float, rhs: dict):
        ops = self.ops
        info = {"diffusion": [], "pressure": []}
        values, fluxes = {}, {}
        theta_star = None
        if self.temperature:
            theta_star, flux, rep = stage_solve_temperature(
                ops, self.theta_solver, self.params.alpha, lam, rhs["theta"]
            )
            values["theta"], fluxes["theta"] = theta_star, flux
            if rep is not None:
                info["diffusion"].append(rep.iterations)
        v_hat, p, reps = stage_solve_momentum(self, lam, rhs["vel"], theta_star, t)
        if reps["diffusion"] is not None:
            info["diffusion"].append(reps["diffusion"].iterations)
        info["pressure"].append(reps["pressure"].iterations)
        self.last_p = p
        self._last_v, self._last_p = v_hat, p
        vbar = ops.project_dual_to_main(v_hat)
        values["vel"] = vbar
        fluxes["vel"] = (vbar - rhs["vel"]) / lam
        return values, fluxes, info

    def finalize(self, state, values, t, combined=False) -> PhysicsState:
        ops = self.ops
        if combined:
            v = self.wall(ops.project_main_to_dual(values["vel"]))
        else:
            v = self._last_v
        self.last_divergence = divergence_residual(ops, v)
        self.last_scale = divergence_scale(ops, v)
        return PhysicsState(t, v=v, p=self._last_p, theta=values.get("theta"))


# ----------------------------------------------------------------------------
# exact solutions and initial data
# ----------------------------------------------------------------------------

CASES = (
    "nonlinear_transport",
    "advdiff_erf",
    "advdiff_varvel",
    "taylor_green",
    "warm_bubble",
    "density_current",
)


def nonlinear_transport_exact(x, t):
    """Transport of ``exp(-100 r)`` by ``v = (x, 0)``: ``C(x e^{-t}, y)``."""
    xs = x[..., 0] * np.exp(-t)
    return np.exp(-100.0 * np.sqrt(xs**2 + x[..., 1] ** 2))


def advdiff_erf_exact(x, t, kappa=1e-3, u=0.2, x0=-0.5, t0=0.5):
    """Translated error-function front, offset in time by ``t0``."""
    return 0.5 - 0.5 * erf((x[..., 0] - x0 - u * t) / np.sqrt(4.0 * kappa * (t + t0)))


def advdiff_varvel_exact(x, t, kappa=0.1):
    """Solution of ``C_t - x C_x = kappa C_xx`` that grows like ``e^t``."""
    xx = x[..., 0]
    return np.exp(t) * (
        -xx
        - 0.5 * sqrt(2.0 * pi * kappa) * erf(xx / np.sqrt(2.0 * kappa)) * xx
        - kappa * np.exp(-(xx**2) / (2.0 * kappa))
    )


def taylor_green_exact(x, t, nu=1e-3, g=0.0):
    """Velocity ``(u, v)`` and pressure of the decaying vortex lifted by ``g t``."""
    e = np.exp(-2.0 * nu * t)
    X, Y = x[..., 0], x[..., 1]
    u = np.sin(X) * np.cos(Y) * e
    v = -np.cos(X) * np.sin(Y) * e + g * t
    p = 0.25 * (np.cos(2.0 * X) + np.cos(2.0 * Y)) * e**2
    return np.stack([u, v], axis=-1), p


def taylor_green_source(x, t, nu=1e-3, g=0.0):
    """Momentum source balancing advection by the uniform lift ``g t``."""
    e = np.exp(-2.0 * nu * t)
    X, Y = x[..., 0], x[..., 1]
    su = -g * t * np.sin(X) * np.sin(Y) * e
    sv = -g * t * np.cos(X) * np.cos(Y) * e
    return np.stack([su, sv], axis=-1)


def warm_bubble_theta(x, theta_b=0.5, center=(0.5, 0.3), radius=0.25):
    r = np.hypot(x[..., 0] - center[0], x[..., 1] - center[1])
    return np.where(r <= radius, 0.5 * theta_b * (1.0 + np.cos(pi * r / radius)), 0.0)


def density_current_theta(x, theta_b=-15.0, center=(0.0, 3.0), radii=(4.0, 2.0)):
    r = np.hypot((x[..., 0] - center[0]) / radii[0], (x[..., 1] - center[1]) / radii[1])
    return np.where(r <= 1.0, 0.5 * theta_b * (1.0 + np.cos(pi * np.minimum(r, 1.0))), 0.0)


def exact_solution(case: str, x, t: float, params: ModelParams | None = None):
    """Closed-form solution of a convergence case at points ``x``.

    Returns the scalar ``C`` for the transport cases and ``(velocity, pressure)``
    for the vortex.
    """
    params = params or ModelParams()
    x = np.asarray(x, dtype=float)
    if case == "nonlinear_transport":
        return nonlinear_transport_exact(x, t)
    if case == "advdiff_erf":
        return advdiff_erf_exact(x, t, kappa=params.kappa or 1e-3)
    if case == "advdiff_varvel":
        return advdiff_varvel_exact(x, t, kappa=params.kappa or 0.1)
    if case == "taylor_green":
        return taylor_green_exact(x, t, nu=params.nu, g=params.gravity)
    raise ValueError(f"no closed-form solution for case {case!r}")
