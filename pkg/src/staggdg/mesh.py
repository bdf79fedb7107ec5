"""Staggered triangular mesh: main triangles, edge-based dual cells, point location.

Conventions
-----------
* Triangles are stored counter-clockwise. Local edge ``alpha`` of a triangle
  runs from vertex ``alpha`` to vertex ``alpha + 1`` (mod 3).
* Every edge ``j`` has a left triangle ``left_of[j]`` (the lower index) and,
  for interior edges, a right triangle ``right_of[j]`` (the higher index,
  ``-1`` on the boundary). The edge nodes ``edges[j] = (a, b)`` follow the
  counter-clockwise order of the left triangle, so the unit normal
  ``(dy, -dx) / |edge|`` points from left to right.
* Periodic edges are merged into a single interior edge. Coordinates are
  always stored in the frame of the owning triangle; ``edge_shift[j]`` is the
  translation that carries a left-frame point into the right frame.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

LEFT, RIGHT = 0, 1
BARY_TOL = 1e-12
MAX_WALK_STEPS = 10_000

# Boundary side labels used to select boundary conditions.
SIDE_XMIN, SIDE_XMAX, SIDE_YMIN, SIDE_YMAX = 0, 1, 2, 3


class MeshError(ValueError):
    """Raised for non-conforming, degenerate or unpairable meshes."""


@dataclass(frozen=True, eq=False)
class StaggeredMesh:
    nodes: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray
    left_of: np.ndarray
    right_of: np.ndarray
    edges_of: np.ndarray
    side_of: np.ndarray
    edge_alpha: np.ndarray
    edge_normal: np.ndarray
    edge_length: np.ndarray
    edge_shift: np.ndarray
    centroid: np.ndarray
    area_main: np.ndarray
    jacobian: np.ndarray
    jacobian_inv: np.ndarray
    neighbors: np.ndarray
    neighbor_shift: np.ndarray
    boundary_side: np.ndarray
    periodic_axes: tuple[bool, bool]
    bounds: tuple[float, float, float, float]
    node_tri_ptr: np.ndarray = field(repr=False)
    node_tri_idx: np.ndarray = field(repr=False)

    @property
    def n_elements(self) -> int:
        return len(self.triangles)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def area_sub(self) -> np.ndarray:
        """Area of every sub-triangle ``T_ij``, shape ``(N_e, 3)``."""
        return np.repeat(self.area_main[:, None] / 3.0, 3, axis=1)

    @property
    def area_dual(self) -> np.ndarray:
        a = self.area_main[self.left_of] / 3.0
        inner = self.right_of >= 0
        a[inner] += self.area_main[self.right_of[inner]] / 3.0
        return a

    @property
    def is_boundary(self) -> np.ndarray:
        return self.right_of < 0

    @property
    def periodic_map(self) -> dict[int, np.ndarray]:
        """Edges merged across a periodic boundary and their translation."""
        idx = np.nonzero(np.any(self.edge_shift != 0.0, axis=1))[0]
        return {int(j): self.edge_shift[j] for j in idx}

    @property
    def diameter(self) -> np.ndarray:
        x = self.nodes[self.triangles]
        d = np.linalg.norm(x - np.roll(x, -1, axis=1), axis=2)
        return d.max(axis=1)

    @property
    def incircle_radius(self) -> np.ndarray:
        x = self.nodes[self.triangles]
        per = np.linalg.norm(x - np.roll(x, -1, axis=1), axis=2).sum(axis=1)
        return 2.0 * self.area_main / per

    def alpha_of(self, i: int, j: int) -> int:
        """Local edge index of edge ``j`` inside triangle ``i``."""
        hit = np.nonzero(self.edges_of[i] == j)[0]
        if hit.size == 0:
            raise KeyError(f"edge {j} is not an edge of triangle {i}")
        return int(hit[0])

    def beta_of(self, i: int, j: int) -> int:
        """Side label of triangle ``i`` in dual cell ``j``: 0 = left, 1 = right."""
        return int(self.side_of[i, self.alpha_of(i, j)])

    def vertices(self, i) -> np.ndarray:
        return self.nodes[self.triangles[i]]


def sigma(mesh: StaggeredMesh, i: int, j: int) -> int:
    """Orientation sign of edge ``j`` seen from triangle ``i``."""
    if i == mesh.left_of[j]:
        return 1
    if i == mesh.right_of[j]:
        return -1
    raise KeyError(f"triangle {i} is not adjacent to edge {j}")


def _orient(nodes: np.ndarray, tris: np.ndarray) -> np.ndarray:
    x = nodes[tris]
    det = (x[:, 1, 0] - x[:, 0, 0]) * (x[:, 2, 1] - x[:, 0, 1]) - (
        x[:, 2, 0] - x[:, 0, 0]
    ) * (x[:, 1, 1] - x[:, 0, 1])
    scale = max(np.ptp(nodes[:, 0]), np.ptp(nodes[:, 1]), 1e-300) ** 2
    if np.any(np.abs(det) <= 1e-14 * scale):
        bad = int(np.argmin(np.abs(det)))
        raise MeshError(f"degenerate triangle {bad}")
    tris = tris.copy()
    flip = det < 0
    tris[flip] = tris[flip][:, [0, 2, 1]]
    return tris


def _pair_periodic(mids, ids, lo_mask, hi_mask, along, period, tol):
    """Match boundary edges on opposite sides by their translated midpoints."""
    lo, hi = ids[lo_mask], ids[hi_mask]
    if len(lo) != len(hi):
        raise MeshError("periodic boundary edges do not pair bijectively")
    lo = lo[np.argsort(mids[lo, along], kind="stable")]
    hi = hi[np.argsort(mids[hi, along], kind="stable")]
    shift = mids[hi] - mids[lo]
    if np.any(np.abs(shift[:, along]) > tol) or np.any(
        np.abs(np.abs(shift[:, 1 - along]) - period) > tol
    ):
        raise MeshError("periodic boundary edges do not pair bijectively")
    return lo, hi


def build_staggered_mesh(nodes, triangles, periodic_axes=(False, False)) -> StaggeredMesh:
    """Build all connectivity and geometry of the staggered mesh.

    Parameters
    ----------
    nodes : array_like, shape (N_nodes, 2)
    triangles : array_like of int, shape (N_e, 3)
        Zero-based node indices; clockwise triangles are re-oriented.
    periodic_axes : pair of bool
        Merge opposite boundary edges along x and/or y.

    Returns
    -------
    StaggeredMesh
    """
    nodes = np.ascontiguousarray(nodes, dtype=float)
    tris = _orient(nodes, np.asarray(triangles, dtype=np.int64))
    ne = len(tris)
    periodic_axes = (bool(periodic_axes[0]), bool(periodic_axes[1]))
    xmin, ymin = nodes.min(axis=0)
    xmax, ymax = nodes.max(axis=0)
    extent = max(xmax - xmin, ymax - ymin)
    tol = 1e-9 * extent

    # incidence list: (triangle, alpha) -> sorted node pair
    a = tris
    b = np.roll(tris, -1, axis=1)
    key = np.stack([np.minimum(a, b), np.maximum(a, b)], axis=-1).reshape(-1, 2)
    uniq, inv, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    inv = inv.reshape(-1)
    if np.any(counts > 2):
        raise MeshError("non-conforming mesh: edge shared by more than two triangles")
    inc_tri = np.repeat(np.arange(ne), 3)
    inc_alpha = np.tile(np.arange(3), ne)

    # order incidences of every raw edge by triangle index
    order = np.lexsort((inc_tri, inv))
    first = np.ones(len(order), dtype=bool)
    first[1:] = inv[order][1:] != inv[order][:-1]
    n_raw = len(uniq)
    raw_left = np.empty(n_raw, dtype=np.int64)
    raw_left_alpha = np.empty(n_raw, dtype=np.int64)
    raw_left[inv[order[first]]] = inc_tri[order[first]]
    raw_left_alpha[inv[order[first]]] = inc_alpha[order[first]]
    raw_right = -np.ones(n_raw, dtype=np.int64)
    raw_right_alpha = -np.ones(n_raw, dtype=np.int64)
    second = order[~first]
    raw_right[inv[second]] = inc_tri[second]
    raw_right_alpha[inv[second]] = inc_alpha[second]
    raw_shift = np.zeros((n_raw, 2))

    # merge periodic boundary edges
    keep = np.ones(n_raw, dtype=bool)
    bnd = np.nonzero(raw_right < 0)[0]
    mids = 0.5 * (nodes[uniq[:, 0]] + nodes[uniq[:, 1]])
    en = nodes[uniq]
    for axis, (lo_val, hi_val) in enumerate(((xmin, xmax), (ymin, ymax))):
        if not periodic_axes[axis]:
            continue
        on_lo = np.all(np.abs(en[bnd, :, axis] - lo_val) <= tol, axis=1)
        on_hi = np.all(np.abs(en[bnd, :, axis] - hi_val) <= tol, axis=1)
        along = 1 - axis
        lo, hi = _pair_periodic(mids, bnd, on_lo, on_hi, along, hi_val - lo_val, tol)
        for e1, e2 in zip(lo, hi):
            t1, t2 = raw_left[e1], raw_left[e2]
            if t1 == t2:
                raise MeshError(f"triangle {t1} would be its own periodic neighbour")
            if t1 <= t2:
                keep_e, drop_e, tr, ar = e1, e2, t2, raw_left_alpha[e2]
            else:
                keep_e, drop_e, tr, ar = e2, e1, t1, raw_left_alpha[e1]
            raw_right[keep_e] = tr
            raw_right_alpha[keep_e] = ar
            raw_shift[keep_e] = mids[drop_e] - mids[keep_e]
            keep[drop_e] = False

    # re-index merged edges
    new_id = -np.ones(n_raw, dtype=np.int64)
    new_id[keep] = np.arange(int(keep.sum()))
    left_of = raw_left[keep]
    right_of = raw_right[keep]
    left_alpha = raw_left_alpha[keep]
    right_alpha = raw_right_alpha[keep]
    edge_shift = raw_shift[keep]
    nd = len(left_of)

    edges_of = np.empty((ne, 3), dtype=np.int64)
    side_of = np.empty((ne, 3), dtype=np.int64)
    edges_of[left_of, left_alpha] = np.arange(nd)
    side_of[left_of, left_alpha] = LEFT
    inner = right_of >= 0
    edges_of[right_of[inner], right_alpha[inner]] = np.nonzero(inner)[0]
    side_of[right_of[inner], right_alpha[inner]] = RIGHT

    ea = tris[left_of, left_alpha]
    eb = tris[left_of, (left_alpha + 1) % 3]
    edges = np.stack([ea, eb], axis=1)
    d = nodes[eb] - nodes[ea]
    edge_length = np.linalg.norm(d, axis=1)
    edge_normal = np.stack([d[:, 1], -d[:, 0]], axis=1) / edge_length[:, None]
    edge_alpha = np.stack([left_alpha, right_alpha], axis=1)

    x = nodes[tris]
    centroid = x.mean(axis=1)
    jac = np.empty((ne, 2, 2))
    jac[:, :, 0] = x[:, 1] - x[:, 0]
    jac[:, :, 1] = x[:, 2] - x[:, 0]
    det = np.linalg.det(jac)
    area = 0.5 * det
    jac_inv = np.linalg.inv(jac)

    neighbors = -np.ones((ne, 3), dtype=np.int64)
    neighbor_shift = np.zeros((ne, 3, 2))
    neighbors[left_of[inner], left_alpha[inner]] = right_of[inner]
    neighbor_shift[left_of[inner], left_alpha[inner]] = edge_shift[inner]
    neighbors[right_of[inner], right_alpha[inner]] = left_of[inner]
    neighbor_shift[right_of[inner], right_alpha[inner]] = -edge_shift[inner]

    emid = 0.5 * (nodes[ea] + nodes[eb])
    boundary_side = -np.ones(nd, dtype=np.int64)
    for label, (axis, val) in enumerate(((0, xmin), (0, xmax), (1, ymin), (1, ymax))):
        hit = (~inner) & (np.abs(emid[:, axis] - val) <= tol) & (
            np.abs(d[:, axis]) <= tol
        )
        boundary_side[hit & (boundary_side < 0)] = label

    flat = tris.reshape(-1)
    order = np.argsort(flat, kind="stable")
    node_tri_idx = (order // 3).astype(np.int64)
    node_tri_ptr = np.zeros(len(nodes) + 1, dtype=np.int64)
    np.add.at(node_tri_ptr, flat + 1, 1)
    node_tri_ptr = np.cumsum(node_tri_ptr)

    return StaggeredMesh(
        nodes=nodes,
        triangles=tris,
        edges=edges,
        left_of=left_of,
        right_of=right_of,
        edges_of=edges_of,
        side_of=side_of,
        edge_alpha=edge_alpha,
        edge_normal=edge_normal,
        edge_length=edge_length,
        edge_shift=edge_shift,
        centroid=centroid,
        area_main=area,
        jacobian=jac,
        jacobian_inv=jac_inv,
        neighbors=neighbors,
        neighbor_shift=neighbor_shift,
        boundary_side=boundary_side,
        periodic_axes=periodic_axes,
        bounds=(float(xmin), float(xmax), float(ymin), float(ymax)),
        node_tri_ptr=node_tri_ptr,
        node_tri_idx=node_tri_idx,
    )


def graded_coordinates(lo, hi, n, power=1.0):
    """``n + 1`` points on ``[lo, hi]`` clustered at the midpoint.

    ``power = 1`` is uniform; larger powers shrink the central cells like
    ``(1 / n) ** power``. Spacing is symmetric about the midpoint.
    """
    u = np.linspace(-1.0, 1.0, n + 1)
    g = np.sign(u) * np.abs(u) ** power
    g[0], g[-1] = -1.0, 1.0
    return 0.5 * (lo + hi) + 0.5 * (hi - lo) * g


def generate_rect_mesh(xmin, xmax, ymin, ymax, nx, ny, grading=1.0):
    """Structured triangulation of a rectangle with checkerboard diagonals.

    Cell ``(ix, iy)`` is split along the diagonal through its lower-left
    corner when ``ix + iy`` is even and through its lower-right corner
    otherwise. ``grading > 1`` clusters the grid lines at the centre (see
    :func:`graded_coordinates`).

    Returns
    -------
    nodes : ndarray, shape ((nx+1)*(ny+1), 2)
    triangles : ndarray, shape (2*nx*ny, 3)
    """
    xs = graded_coordinates(xmin, xmax, nx, grading)
    ys = graded_coordinates(ymin, ymax, ny, grading)
    X, Y = np.meshgrid(xs, ys)
    nodes = np.stack([X.ravel(), Y.ravel()], axis=1)
    iy, ix = np.meshgrid(np.arange(ny), np.arange(nx), indexing="ij")
    ix, iy = ix.ravel(), iy.ravel()
    n00 = iy * (nx + 1) + ix
    n10, n01, n11 = n00 + 1, n00 + nx + 1, n00 + nx + 2
    even = (ix + iy) % 2 == 0
    t1 = np.where(even[:, None], np.stack([n00, n10, n11], 1), np.stack([n00, n10, n01], 1))
    t2 = np.where(even[:, None], np.stack([n00, n11, n01], 1), np.stack([n10, n11, n01], 1))
    tris = np.stack([t1, t2], axis=1).reshape(-1, 3)
    return nodes, tris


def read_mesh(path) -> tuple[np.ndarray, np.ndarray]:
    """Read the plain-text mesh format (header ``N_nodes N_e``, 1-based triangles)."""
    tokens = Path(path).read_text().split()
    nn, ne = int(tokens[0]), int(tokens[1])
    vals = tokens[2:]
    if len(vals) != 2 * nn + 3 * ne:
        raise MeshError(f"{path}: expected {2 * nn + 3 * ne} values, found {len(vals)}")
    nodes = np.array(vals[: 2 * nn], dtype=float).reshape(nn, 2)
    tris = np.array(vals[2 * nn :], dtype=np.int64).reshape(ne, 3) - 1
    return nodes, tris


def write_mesh(path, nodes, triangles) -> None:
    lines = [f"{len(nodes)} {len(triangles)}"]
    lines += [f"{float(x)!r} {float(y)!r}" for x, y in np.asarray(nodes, dtype=float)]
    lines += [f"{a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(triangles)]
    Path(path).write_text("\n".join(lines) + "\n")


# ----------------------------------------------------------------------------
# barycentric coordinates and straight-line walking
# ----------------------------------------------------------------------------


def reference_coords(mesh: StaggeredMesh, cells, x) -> np.ndarray:
    """Reference coordinates of points ``x`` in their cells' affine maps."""
    x0 = mesh.nodes[mesh.triangles[cells, 0]]
    return np.einsum("nij,nj->ni", mesh.jacobian_inv[cells], x - x0)


def barycentric(mesh: StaggeredMesh, cells, x) -> np.ndarray:
    xi = reference_coords(mesh, cells, x)
    return np.stack([1.0 - xi[..., 0] - xi[..., 1], xi[..., 0], xi[..., 1]], axis=-1)


@dataclass
class WalkResult:
    """Outcome of walking straight segments through the mesh.

    ``position`` is expressed in the frame of ``cell``; ``shift`` accumulates the
    periodic translations applied on the way. Points that left the domain
    through a non-periodic boundary have ``outside`` set: their ``cell`` and
    ``position`` are the exit cell and exit point and ``target`` holds the
    unclamped end point in the same frame.
    """

    cell: np.ndarray
    position: np.ndarray
    shift: np.ndarray
    outside: np.ndarray
    target: np.ndarray
    crossings: int = 0
    steps: int = 0


def walk_segments(
    mesh: StaggeredMesh, cells, start, disp, max_steps=MAX_WALK_STEPS, log: list | None = None
) -> WalkResult:
    """Move every point along a straight displacement, cell by cell.

    Only the current cell and its edge neighbours are ever inspected; pass a
    list as ``log`` to record every ``(from_cells, to_cells)`` transition. A
    crossing is taken at the first barycentric coordinate that reaches zero;
    a point that makes no progress twice in a row is nudged forward by
    ``1e-11`` times the cell diameter to break ties on vertices and
    tangential paths.
    """
    cells = np.array(cells, dtype=np.int64, copy=True)
    pos = np.array(start, dtype=float, copy=True)
    rem = np.array(disp, dtype=float, copy=True)
    n = len(cells)
    shift = np.zeros((n, 2))
    outside = np.zeros(n, dtype=bool)
    stalls = np.zeros(n, dtype=np.int64)
    active = np.ones(n, dtype=bool)
    diam = mesh.diameter
    crossings = 0
    step = 0
    for step in range(max_steps):
        idx = np.nonzero(active)[0]
        if idx.size == 0:
            break
        c = cells[idx]
        lam = barycentric(mesh, c, pos[idx])
        dxi = np.einsum("nij,nj->ni", mesh.jacobian_inv[c], rem[idx])
        dlam = np.stack([-dxi[:, 0] - dxi[:, 1], dxi[:, 0], dxi[:, 1]], axis=1)
        scale = np.abs(dlam).max(axis=1, keepdims=True)
        leaving = dlam < -1e-14 * scale
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            t = np.where(leaving, -lam / dlam, np.inf)
        t = np.maximum(t, 0.0)
        k = np.argmin(t, axis=1)
        tmin = t[np.arange(len(idx)), k]
        done = tmin >= 1.0 - BARY_TOL
        fin = idx[done]
        pos[fin] += rem[fin]
        rem[fin] = 0.0
        active[fin] = False

        cross = ~done
        ci = idx[cross]
        if ci.size == 0:
            continue
        tc = tmin[cross]
        pos[ci] += tc[:, None] * rem[ci]
        rem[ci] *= (1.0 - tc)[:, None]
        stalled = tc <= 1e-14
        stalls[ci] = np.where(stalled, stalls[ci] + 1, 0)
        cc = c[cross]
        alpha = (k[cross] + 1) % 3
        nb = mesh.neighbors[cc, alpha]
        wall = nb < 0
        out = ci[wall]
        outside[out] = True
        active[out] = False
        go = ~wall
        gi = ci[go]
        sh = mesh.neighbor_shift[cc[go], alpha[go]]
        pos[gi] += sh
        shift[gi] += sh
        cells[gi] = nb[go]
        crossings += int(gi.size)
        if log is not None:
            log.append((cc[go].copy(), nb[go].copy()))
        # break ties on vertices and tangential paths
        stuck = gi[stalls[gi] >= 2]
        if stuck.size:
            r = rem[stuck]
            rn = np.linalg.norm(r, axis=1)
            hop = np.minimum(1e-11 * diam[cells[stuck]], rn)
            with np.errstate(invalid="ignore", divide="ignore"):
                step_vec = np.where(rn[:, None] > 0, r * (hop / rn)[:, None], 0.0)
            pos[stuck] += step_vec
            rem[stuck] -= step_vec
            stalls[stuck] = 0
    else:
        raise RuntimeError("point walk exceeded the safety cap on sub-steps")
    target = pos + rem
    return WalkResult(cells, pos, shift, outside, target, crossings, step)


def resolve_ties(mesh: StaggeredMesh, cells, pos):
    """Move points lying on a shared edge or vertex to the lowest-index cell.

    Returns updated ``(cells, pos, shift)`` where ``shift`` is the periodic
    translation applied to each point.
    """
    cells = np.array(cells, dtype=np.int64, copy=True)
    pos = np.array(pos, dtype=float, copy=True)
    shift = np.zeros_like(pos)
    for _ in range(8):
        lam = barycentric(mesh, cells, pos)
        on = lam < BARY_TOL
        changed = False
        # vertex hits: scan the vertex fan
        vert = np.nonzero(on.sum(axis=1) >= 2)[0]
        for p in vert:
            v = int(np.argmax(lam[p]))
            node = mesh.triangles[cells[p], v]
            fan = mesh.node_tri_idx[mesh.node_tri_ptr[node] : mesh.node_tri_ptr[node + 1]]
            best = int(fan.min())
            if best < cells[p]:
                cells[p] = best
                changed = True
        # edge hits: compare with the neighbour across
        for kk in range(3):
            alpha = (kk + 1) % 3
            nb = mesh.neighbors[cells, alpha]
            sel = on[:, kk] & (nb >= 0) & (nb < cells) & (on.sum(axis=1) == 1)
            if np.any(sel):
                sh = mesh.neighbor_shift[cells[sel], alpha]
                pos[sel] += sh
                shift[sel] += sh
                cells[sel] = nb[sel]
                changed = True
        if not changed:
            break
    return cells, pos, shift


def wrap_periodic(mesh: StaggeredMesh, x) -> np.ndarray:
    x = np.array(x, dtype=float, copy=True)
    xmin, xmax, ymin, ymax = mesh.bounds
    for axis, (lo, hi) in enumerate(((xmin, xmax), (ymin, ymax))):
        if mesh.periodic_axes[axis]:
            x[..., axis] = lo + np.mod(x[..., axis] - lo, hi - lo)
    return x


def _brute_force(mesh: StaggeredMesh, x) -> int:
    lam = barycentric(mesh, np.arange(mesh.n_elements), np.broadcast_to(x, (mesh.n_elements, 2)))
    inside = np.nonzero(np.all(lam >= -BARY_TOL, axis=1))[0]
    if inside.size == 0:
        return -1
    return int(inside.min())


def locate_point(mesh: StaggeredMesh, x, hint: int = 0):
    """Find the triangle containing ``x``.

    The search walks from the centroid of ``hint``; on shared edges and
    vertices the lowest triangle index wins. Periodic coordinates are wrapped
    into the domain first.

    Returns
    -------
    cell : int
    bary : ndarray, shape (3,)

    Raises
    ------
    ValueError
        If ``x`` lies outside the domain.
    """
    x = wrap_periodic(mesh, np.asarray(x, dtype=float))
    start = mesh.centroid[hint][None]
    res = walk_segments(mesh, [hint], start, (x - start[0])[None])
    if res.outside[0]:
        cell = _brute_force(mesh, x)
        if cell < 0:
            raise ValueError(f"point {x} lies outside the mesh")
        pos = x[None]
    else:
        cell = int(res.cell[0])
        pos = wrap_periodic(mesh, res.position)
    cells, pos, _ = resolve_ties(mesh, [cell], pos)
    lam = barycentric(mesh, cells, pos)[0]
    if np.any(lam < -1e-9):
        cell = _brute_force(mesh, x)
        if cell < 0:
            raise ValueError(f"point {x} lies outside the mesh")
        cells, pos, _ = resolve_ties(mesh, [cell], x[None])
        lam = barycentric(mesh, cells, pos)[0]
    return int(cells[0]), lam
