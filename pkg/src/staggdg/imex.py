"""Semi-Lagrangian IMEX Runge-Kutta stepping on the main grid.

For each arrival quadrature point ``x`` the step samples one velocity per
stage along an explicit Runge-Kutta integration of the backward trajectory:

    K_s = v^E_s(X^E_s),    X^E_s = x - dt sum_{r<s} at[s, r] K_r,

where ``v^E_s`` is the explicit stage velocity (prescribed, or the
transported velocity field with shifted explicit fluxes). Any other point
of the trajectory, ``theta dt`` upstream of ``x``, is read from the same
samples through a continuous extension

    X(theta) = x - dt sum_r beta_r(theta) K_r,

whose weights match the moments ``sum beta = theta``, ``sum beta c =
theta^2 / 2`` and, with four samples, ``sum beta c^2 = theta^3 / 3`` and
``sum beta (at c) = theta^3 / 6``. At ``theta = 1`` they reduce to ``b``.
Stage ``s`` transports the state to the foot ``X(c_s)`` and adds each
earlier stage flux ``H_j`` sampled at ``X(c_s - c_j)``, where the particle
arriving at ``x`` was at stage ``j``. For a constant velocity every shift
reduces to ``(c_s - c_j) dt v`` exactly. The final update uses the same
construction with the weights ``b``; for stiffly accurate tableaux it
coincides with the last stage.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import sqrt

import numpy as np

from .semi_lagrangian import FootTable, feet_from_displacement, interpolate_at_feet


@dataclass(frozen=True, eq=False)
class ButcherPair:
    """Explicit/implicit Runge-Kutta pair sharing the weights ``b``."""

    order: int
    explicit: np.ndarray
    implicit: np.ndarray
    b: np.ndarray

    @property
    def n_stages(self) -> int:
        return len(self.b)

    @property
    def c_explicit(self) -> np.ndarray:
        return self.explicit.sum(axis=1)

    @property
    def c_implicit(self) -> np.ndarray:
        return self.implicit.sum(axis=1)

    @property
    def stiffly_accurate(self) -> bool:
        return bool(np.array_equal(self.implicit[-1], self.b))


def tableau(R: int) -> ButcherPair:
    """Double tableau of order index ``R`` (0: Euler, 1: two stages, 2: four stages)."""
    if R == 0:
        return ButcherPair(0, np.zeros((1, 1)), np.ones((1, 1)), np.ones(1))
    if R == 1:
        g = 1.0 - 1.0 / sqrt(2.0)
        beta = 1.0 / (2.0 * g)
        at = np.array([[0.0, 0.0], [beta, 0.0]])
        a = np.array([[g, 0.0], [1.0 - g, g]])
        return ButcherPair(1, at, a, np.array([1.0 - g, g]))
    if R == 2:
        # the implicit part is the L-stable three-stage SDIRK; its entries are
        # exact functions of the root gamma of g^3 - 3 g^2 + 3/2 g - 1/6
        g = _sdirk3_gamma()
        b2 = -(6.0 * g * g - 16.0 * g + 1.0) / 4.0
        b3 = (6.0 * g * g - 20.0 * g + 5.0) / 4.0
        a = np.array(
            [
                [g, 0.0, 0.0, 0.0],
                [0.0, g, 0.0, 0.0],
                [0.0, (1.0 - g) / 2.0, g, 0.0],
                [0.0, b2, b3, g],
            ]
        )
        at = _explicit_third_order(a, g)
        return ButcherPair(2, at, a, a[-1].copy())
    raise ValueError(f"unsupported IMEX order index R={R}; expected 0, 1 or 2")


def _explicit_third_order(a: np.ndarray, g: float) -> np.ndarray:
    """Explicit partner of the four-stage implicit table ``a``.

    With entries ``(1, 0) = g`` and ``(3, 1) = 1/2`` and abscissae
    ``(0, g, (1+g)/2, 1)``, the two free entries ``(2, 1)`` and ``(3, 2)``
    solve the third-order conditions ``b A c = 1/6`` for both the explicit
    and the implicit abscissae. Rounded to six digits they give 1.437745,
    -0.719812, 0.916993 and -0.416993.
    """
    b = a[-1]
    c3 = (1.0 + g) / 2.0
    rows, rhs = [], []
    for v in (np.array([0.0, g, c3, 1.0]), a.sum(axis=1)):
        rows.append([b[2] * (v[1] - v[0]), g * (v[2] - v[0])])
        rhs.append(1.0 / 6.0 - b[1] * g * v[0] - b[2] * c3 * v[0] - g * (v[0] + v[1]) / 2.0)
    a32, a43 = np.linalg.solve(np.array(rows), np.array(rhs))
    at = np.zeros((4, 4))
    at[1, 0] = g
    at[2, :2] = [c3 - a32, a32]
    at[3, :3] = [0.5 - a43, 0.5, a43]
    return at


def _sdirk3_gamma() -> float:
    roots = np.roots([1.0, -3.0, 1.5, -1.0 / 6.0])
    return float(next(r.real for r in roots if 0.4 < r.real < 0.5))


def stage_weights(tab: ButcherPair, s: int) -> np.ndarray:
    """Fractional flux shifts ``w_j = sum_{r<=j} a[j, r] - sum_{r<=j} a[s, r]``.

    ``s`` is 1-based; returns ``w_1 .. w_{s-1}``.
    """
    a = tab.implicit
    return np.array([a[j, : j + 1].sum() - a[s - 1, : j + 1].sum() for j in range(s - 1)])


def final_weights(tab: ButcherPair) -> np.ndarray:
    """``w_j = sum_{r<=j} a[N_s, r] - sum_r b_r`` for ``j = 1 .. N_s``."""
    a = tab.implicit
    return np.array([a[-1, : j + 1].sum() - tab.b.sum() for j in range(tab.n_stages)])


def composite_displacement(tab: ButcherPair, s: int, stage_velocities, kind: str, dt: float) -> np.ndarray:
    """Upstream displacement of stage ``s`` (1-based) from sampled stage velocities.

    ``stage_velocities[r]`` holds the velocity samples ``K_{r+1}`` at the
    arrival points. ``kind="explicit"`` uses ``at[s, r]`` for ``r < s``;
    ``kind="implicit"`` uses ``a[s, r]`` for ``r <= s``.
    """
    if kind == "explicit":
        row, upto = tab.explicit[s - 1], s - 1
    elif kind == "implicit":
        row, upto = tab.implicit[s - 1], s
    else:
        raise ValueError(f"kind must be 'explicit' or 'implicit', got {kind!r}")
    disp = np.zeros_like(np.asarray(stage_velocities[0], dtype=float))
    for r in range(upto):
        if row[r] != 0.0:
            disp -= dt * row[r] * stage_velocities[r]
    return disp


def trajectory_weights(tab: ButcherPair, m: int, theta: float) -> np.ndarray:
    """Weights ``beta`` of ``K_1 .. K_m`` for the point ``theta dt`` upstream.

    The first ``m`` of the moment conditions ``1, c, c^2, at c`` are imposed
    on the explicit abscissae, which gives order ``min(m, 3)`` along steady
    trajectories.
    """
    at = tab.explicit[:m, :m]
    c = tab.c_explicit[:m]
    rows = [np.ones(m), c, c**2, at @ c][:m]
    rhs = np.array([theta, theta**2 / 2.0, theta**3 / 3.0, theta**3 / 6.0][:m])
    return np.linalg.solve(np.array(rows), rhs)


def _weighted_displacement(beta: np.ndarray, K: list, dt: float):
    disp = None
    for r, w in enumerate(beta):
        if w != 0.0:
            term = -dt * w * K[r]
            disp = term if disp is None else disp + term
    return disp


@dataclass
class StepStats:
    """Per-step counters collected by :func:`imex_step`."""

    diffusion_iterations: list[int] = field(default_factory=list)
    pressure_iterations: list[int] = field(default_factory=list)
    crossings: int = 0


class _FootCache:
    """Locate feet once per distinct displacement within a step."""

    def __init__(self, ops):
        self.ops = ops
        self.identity: FootTable | None = None
        self.crossings = 0

    def get(self, disp) -> FootTable:
        if disp is None:
            if self.identity is None:
                ne, ng = self.ops.mesh.n_elements, self.ops.vol_rule.size
                self.identity = feet_from_displacement(self.ops, np.zeros((ne, ng, 2)))
            return self.identity
        ft = feet_from_displacement(self.ops, disp)
        self.crossings += ft.crossings
        return ft


def _lagrangian_values(ops, fields, fluxes, feet, coefs, shift_feet, dt, outside):
    """Point values ``q^n(foot) + dt sum_j coef_j H_j(shifted foot)`` per field."""
    out = {}
    for name, q in fields.items():
        vals = interpolate_at_feet(ops, q, feet, outside.get(name))
        for j, cj in enumerate(coefs):
            if cj != 0.0:
                vals = vals + dt * cj * interpolate_at_feet(ops, fluxes[j][name], shift_feet[j])
        out[name] = vals
    return out


def imex_step(model, state, tab: ButcherPair, dt: float, final: str = "auto"):
    """Advance ``state`` by one semi-Lagrangian IMEX step of size ``dt``.

    Parameters
    ----------
    model
        Physics model exposing ``ops``, ``transported(state)``,
        ``velocity_field`` (``"prescribed"`` or the name of a transported
        main-grid velocity), ``prescribed_velocity(t)``,
        ``outside_values(t)``, ``stage_solve(s, t, lam, rhs)`` and
        ``finalize(state, values, t)``.
    state
        Model state carrying the current time ``state.t``.
    tab : ButcherPair
    dt : float
    final : {"auto", "combine", "last"}
        ``"auto"`` uses the last stage for stiffly accurate tableaux and the
        ``b``-weighted combination otherwise.

    Returns
    -------
    new_state, StepStats
    """
    ops = model.ops
    t0 = state.t
    ns = tab.n_stages
    at, a = tab.explicit, tab.implicit
    c_exp, c_imp = tab.c_explicit, tab.c_implicit
    q_n = model.transported(state)
    outside_n = model.outside_values(t0)
    cache = _FootCache(ops)
    K: list[np.ndarray] = []
    H: list[dict] = []
    values: dict = {}
    stats = StepStats()
    vel_name = model.velocity_field

    def sample_velocity(s: int) -> None:
        # velocity sample of stage s along the explicit backward trajectory
        disp_e = None
        for r in range(s):
            if at[s, r] != 0.0:
                term = -dt * at[s, r] * K[r]
                disp_e = term if disp_e is None else disp_e + term
        feet_e = cache.get(disp_e) if s > 0 else None
        if vel_name == "prescribed":
            vfield = model.prescribed_velocity(t0 + c_exp[s] * dt)
        elif s == 0:
            vfield = q_n[vel_name]
        else:
            shift_e = [
                cache.get(_weighted_displacement(trajectory_weights(tab, s, c_exp[s] - c_imp[j]), K, dt))
                if at[s, j] != 0.0
                else None
                for j in range(s)
            ]
            vals = _lagrangian_values(
                ops, {vel_name: q_n[vel_name]}, H, feet_e, at[s, :s], shift_e, dt, outside_n
            )
            vfield = ops.project_gauss_values(vals[vel_name])
        if s == 0:
            K.append(_eval_at_points(ops, vfield))
        else:
            K.append(interpolate_at_feet(ops, vfield, feet_e))

    # a prescribed velocity does not depend on the stages, so every stage
    # can read the trajectory from all samples
    prescribed = vel_name == "prescribed"
    if prescribed:
        for s in range(ns):
            sample_velocity(s)

    for s in range(ns):
        if not prescribed:
            sample_velocity(s)
        m = ns if prescribed else s + 1

        # implicit foot and shifted fluxes of stage s
        feet_i = cache.get(_weighted_displacement(trajectory_weights(tab, m, c_imp[s]), K, dt))
        shift_i = [
            cache.get(_weighted_displacement(trajectory_weights(tab, m, c_imp[s] - c_imp[j]), K, dt))
            if a[s, j] != 0.0
            else None
            for j in range(s)
        ]
        vals = _lagrangian_values(ops, q_n, H, feet_i, a[s, :s], shift_i, dt, outside_n)
        rhs = {name: ops.project_gauss_values(v) for name, v in vals.items()}
        lam = a[s, s] * dt
        values, fluxes, info = model.stage_solve(s, t0 + tab.c_implicit[s] * dt, lam, rhs)
        H.append(fluxes)
        stats.diffusion_iterations.extend(info.get("diffusion", []))
        stats.pressure_iterations.extend(info.get("pressure", []))

    mode = final
    if mode == "auto":
        mode = "last" if tab.stiffly_accurate else "combine"
    if mode == "combine":
        disp_f = None
        for r in range(ns):
            if tab.b[r] != 0.0:
                term = -dt * tab.b[r] * K[r]
                disp_f = term if disp_f is None else disp_f + term
        feet_f = cache.get(disp_f)
        shift_f = [
            cache.get(_weighted_displacement(trajectory_weights(tab, ns, 1.0 - c_imp[j]), K, dt))
            if tab.b[j] != 0.0
            else None
            for j in range(ns)
        ]
        vals = _lagrangian_values(ops, q_n, H, feet_f, tab.b, shift_f, dt, outside_n)
        combined = {name: ops.project_gauss_values(v) for name, v in vals.items()}
        new_state = model.finalize(state, combined, t0 + dt, combined=True)
    elif mode == "last":
        new_state = model.finalize(state, values, t0 + dt, combined=False)
    else:
        raise ValueError(f"unknown final mode {final!r}")
    stats.crossings = cache.crossings
    return new_state, stats


def _eval_at_points(ops, field):
    """Values of a main field at its own volume quadrature points."""
    return np.einsum("gk,nk...->ng...", ops.phi_gauss, field)
