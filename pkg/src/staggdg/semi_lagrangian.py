"""Backward characteristics: foot location, interpolation and transported projection.

Feet are computed for every volume quadrature point of every main element.
Points are moved through the mesh one cell at a time by intersecting the
straight sub-path with the cell boundary; crossing a periodic edge applies
the recorded translation. A foot that exits through a non-periodic boundary
is clamped at the exit point; callers may supply boundary data evaluated at
the unclamped target instead.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .basis import eval_main_basis
from .mesh import (
    BARY_TOL,
    MAX_WALK_STEPS,
    StaggeredMesh,
    barycentric,
    reference_coords,
    resolve_ties,
    walk_segments,
)
from .operators import StaggeredOperators

MAX_BOUNCES = 4


@dataclass
class FootTable:
    """Feet of the characteristics through all volume quadrature points.

    Arrays are flattened over ``(element, point)`` in C order; ``shape`` is
    ``(N_e, N_g)``. ``position`` lives in the frame of ``cell``; ``target`` is
    the unclamped foot for points flagged ``outside``.
    """

    shape: tuple[int, int]
    position: np.ndarray
    cell: np.ndarray
    ref: np.ndarray
    shift: np.ndarray
    outside: np.ndarray
    target: np.ndarray
    crossings: int = 0


def _finish(mesh: StaggeredMesh, shape, cell, pos, shift, outside, target, crossings) -> FootTable:
    inside = ~outside
    if np.any(inside):
        c, p, sh = resolve_ties(mesh, cell[inside], pos[inside])
        cell = cell.copy()
        pos = pos.copy()
        shift = shift.copy()
        target = target.copy()
        cell[inside] = c
        pos[inside] = p
        shift[inside] += sh
        target[inside] = p
    lam = np.clip(barycentric(mesh, cell, pos), 0.0, None)
    lam /= lam.sum(axis=1, keepdims=True)
    ref = lam[:, 1:]
    return FootTable(shape, pos, cell, ref, shift, outside, target, crossings)


def feet_from_displacement(ops: StaggeredOperators, disp: np.ndarray, start=None, log=None) -> FootTable:
    """Locate ``x_g + disp`` for every quadrature point ``x_g``.

    Parameters
    ----------
    disp : ndarray, shape (N_e, N_g, 2)
        Signed displacement from each quadrature point (upstream feet have
        ``disp = -span * velocity``).
    """
    mesh = ops.mesh
    ne, ng = disp.shape[:2]
    x = ops.gauss_points() if start is None else start
    cells = np.repeat(np.arange(ne), ng)
    res = walk_segments(mesh, cells, x.reshape(-1, 2), disp.reshape(-1, 2), log=log)
    return _finish(
        mesh, (ne, ng), res.cell, res.position, res.shift, res.outside, res.target, res.crossings
    )


def trace_displacement(
    ops: StaggeredOperators,
    velocity_main: np.ndarray,
    start: np.ndarray,
    start_cell: np.ndarray,
    total_weight,
    max_steps: int = MAX_WALK_STEPS,
    log: list | None = None,
):
    """Integrate ``dx/dt = -v`` over the span ``total_weight`` from ``start``.

    The velocity polynomial of the current cell is re-evaluated at every cell
    entry; each sub-path is straight and is truncated where it leaves the
    cell.

    Returns
    -------
    foot : ndarray, shape (n, 2)
        Foot positions in the frame of ``cell``.
    cell : ndarray of int
    outside : ndarray of bool
        Trajectories stopped at a non-periodic boundary.
    """
    mesh = ops.mesh
    pos = np.array(start, dtype=float, copy=True).reshape(-1, 2)
    cell = np.array(start_cell, dtype=np.int64, copy=True).reshape(-1)
    span = np.broadcast_to(np.asarray(total_weight, dtype=float), cell.shape).copy()
    outside = np.zeros(len(cell), dtype=bool)
    active = span != 0.0
    prev = -np.ones(len(cell), dtype=np.int64)
    bounces = np.zeros(len(cell), dtype=np.int64)
    for _ in range(max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        c = cell[idx]
        xi = reference_coords(mesh, c, pos[idx])
        vel = np.einsum("nk,nkd->nd", eval_main_basis(ops.main, xi), velocity_main[c])
        disp = -vel * span[idx, None]
        lam = barycentric(mesh, c, pos[idx])
        dxi = np.einsum("nij,nj->ni", mesh.jacobian_inv[c], disp)
        dlam = np.stack([-dxi[:, 0] - dxi[:, 1], dxi[:, 0], dxi[:, 1]], axis=1)
        scale = np.abs(dlam).max(axis=1, keepdims=True)
        leaving = dlam < -1e-14 * scale
        with np.errstate(divide="ignore", invalid="ignore"):
            t = np.where(leaving, -lam / dlam, np.inf)
        t = np.maximum(t, 0.0)
        k = np.argmin(t, axis=1)
        tmin = t[np.arange(len(idx)), k]
        done = tmin >= 1.0 - BARY_TOL
        fin = idx[done]
        pos[fin] += disp[done]
        span[fin] = 0.0
        active[fin] = False
        cr = ~done
        ci = idx[cr]
        if ci.size == 0:
            continue
        tc = tmin[cr]
        alpha = (k[cr] + 1) % 3
        nb = mesh.neighbors[c[cr], alpha]
        # velocities converging on an edge from both sides bounce a point
        # between the two cells without progress; it stops on that edge
        bounce = (nb == prev[ci]) & (tc < 1e-6)
        bounces[ci] = np.where(bounce, bounces[ci] + 1, 0)
        stuck = bounces[ci] > MAX_BOUNCES
        if np.any(stuck):
            span[ci[stuck]] = 0.0
            active[ci[stuck]] = False
            keep = ~stuck
            ci, tc, alpha, nb = ci[keep], tc[keep], alpha[keep], nb[keep]
            cr = np.nonzero(cr)[0][keep]
            if ci.size == 0:
                continue
        # a zero-length hop into the neighbour still consumes a tiny span
        tc = np.maximum(tc, 1e-13)
        pos[ci] += tc[:, None] * disp[cr]
        span[ci] *= 1.0 - tc
        wall = nb < 0
        outside[ci[wall]] = True
        active[ci[wall]] = False
        go = ~wall
        gi = ci[go]
        pos[gi] += mesh.neighbor_shift[c[cr][go], alpha[go]]
        prev[gi] = c[cr][go]
        if log is not None:
            log.append((c[cr][go].copy(), nb[go].copy()))
        cell[gi] = nb[go]
    else:
        raise RuntimeError("trajectory exceeded the safety cap on sub-steps")
    inside = ~outside
    if np.any(inside):
        cc, pp, _ = resolve_ties(mesh, cell[inside], pos[inside])
        cell[inside] = cc
        pos[inside] = pp
    return pos, cell, outside


def build_foot_table(ops: StaggeredOperators, velocity_main: np.ndarray, spans) -> FootTable:
    """Trace every volume quadrature point upstream over its own span."""
    ne = ops.mesh.n_elements
    ng = ops.vol_rule.size
    x = ops.gauss_points().reshape(-1, 2)
    cells = np.repeat(np.arange(ne), ng)
    spans = np.broadcast_to(np.asarray(spans, dtype=float), (ne, ng)).reshape(-1)
    pos, cell, outside = trace_displacement(ops, velocity_main, x, cells, spans)
    shift = np.zeros_like(pos)
    return _finish(ops.mesh, (ne, ng), cell, pos, shift, outside, pos.copy(), 0)


def interpolate_at_feet(
    ops: StaggeredOperators,
    field: np.ndarray,
    feet: FootTable,
    outside_value: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """Sample a main field at the feet, shape ``(N_e, N_g, ...)``.

    Feet outside the domain use ``outside_value(target)`` when given and the
    clamped boundary value otherwise.
    """
    phi = eval_main_basis(ops.main, feet.ref)
    vals = np.einsum("nk,nk...->n...", phi, field[feet.cell])
    if outside_value is not None and np.any(feet.outside):
        out = feet.outside
        vals[out] = np.asarray(outside_value(feet.target[out]), dtype=float)
    return vals.reshape(feet.shape + field.shape[2:])


def transported_projection(
    ops: StaggeredOperators,
    source: np.ndarray,
    feet: FootTable,
    outside_value: Callable[[np.ndarray], np.ndarray] | None = None,
) -> np.ndarray:
    """``M_bar^{-1} sum_g phi(xi_g) w_g |J| f(x_F(x_g))`` element by element."""
    return ops.project_gauss_values(interpolate_at_feet(ops, source, feet, outside_value))
