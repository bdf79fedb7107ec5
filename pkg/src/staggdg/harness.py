"""Command-line harness: configuration, case setup, runs, errors, convergence and export.

Configuration files are flat ``key = value`` text; ``#`` starts a comment.
Every key of :class:`RunConfig` may be overridden on the command line with
``--set key=value``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from math import ceil, log, pi
from pathlib import Path

import numpy as np

from .basis import eval_dual_half, eval_main_basis, nodal_basis
from .imex import imex_step, tableau
from .krylov import DEFAULT_TOL, SolverError
from .mesh import (
    SIDE_XMAX,
    SIDE_XMIN,
    SIDE_YMAX,
    SIDE_YMIN,
    build_staggered_mesh,
    generate_rect_mesh,
    read_mesh,
)
from .models import (
    CASES,
    AdvectionDiffusionModel,
    ModelParams,
    NavierStokesModel,
    PhysicsState,
    advdiff_erf_exact,
    advdiff_varvel_exact,
    density_current_theta,
    divergence_residual,
    nonlinear_transport_exact,
    taylor_green_exact,
    taylor_green_source,
    warm_bubble_theta,
)
from .operators import StaggeredOperators

EXIT_OK, EXIT_SOLVER, EXIT_CONFIG = 0, 2, 3
BC_CHOICES = ("periodic", "dirichlet", "neumann", "wall")


class ConfigError(ValueError):
    """Invalid or inconsistent run configuration."""


@dataclass
class RunConfig:
    """All settings of one run.

    ``nx`` and ``ny`` give the number of rectangular cells of the generated
    mesh (two triangles each); ``mesh_file`` replaces the generated mesh.
    ``refine`` multiplies ``nx`` and ``ny`` and divides ``dt``; the
    convergence driver sets it per level.
    """

    case: str = "taylor_green"
    p: int = 2
    imex_order: int = 2
    dt: float = 0.1
    t_end: float = 0.1
    nu: float = 0.0
    alpha: float = 0.0
    kappa: float = 0.0
    beta: float = 0.0
    gravity: float = 0.0
    theta0: float = 0.0
    bc_x: str = "periodic"
    bc_y: str = "periodic"
    xmin: float = 0.0
    xmax: float = 1.0
    ymin: float = 0.0
    ymax: float = 1.0
    nx: int = 8
    ny: int = 8
    refine: int = 1
    grading: float = 1.0
    jitter: float = 0.0
    mesh_file: str = ""
    error_xmax: float = 0.0
    cg_tol: float = DEFAULT_TOL
    cg_maxit: int = 0
    output_dir: str = ""
    output_every: int = 0
    report_timings: bool = False

    def validate(self) -> "RunConfig":
        if self.case not in CASES:
            raise ConfigError(f"unknown case {self.case!r}; choose from {', '.join(CASES)}")
        if not 0 <= self.p <= 4:
            raise ConfigError(f"p must lie in [0, 4], got {self.p}")
        if self.imex_order not in (0, 1, 2):
            raise ConfigError(f"imex_order must be 0, 1 or 2, got {self.imex_order}")
        if self.dt <= 0.0 or self.t_end < 0.0:
            raise ConfigError("dt must be positive and t_end non-negative")
        for key in ("bc_x", "bc_y"):
            if getattr(self, key) not in BC_CHOICES:
                raise ConfigError(f"{key} must be one of {BC_CHOICES}")
        for key in ("nu", "alpha", "kappa"):
            if getattr(self, key) < 0.0:
                raise ConfigError(f"{key} must be non-negative")
        if not 0.0 <= self.jitter < 0.5:
            raise ConfigError("jitter must lie in [0, 0.5)")
        if self.grading < 1.0:
            raise ConfigError("grading must be at least 1")
        if self.nx < 1 or self.ny < 1 or self.refine < 1:
            raise ConfigError("nx, ny and refine must be positive")
        if self.mesh_file and not Path(self.mesh_file).is_file():
            raise ConfigError(f"mesh file {self.mesh_file!r} does not exist")
        return self

    @property
    def step(self) -> float:
        return self.dt / self.refine


# Setups of the six cases; explicit config keys override these. The cusp of
# the nonlinear transport case sits at x = 0, so its mesh is graded there.
CASE_DEFAULTS: dict[str, dict] = {
    "nonlinear_transport": dict(
        xmin=-2.5, xmax=2.5, ymin=-0.5, ymax=0.5, nx=16, ny=8, grading=3.0, bc_x="dirichlet",
        bc_y="periodic", kappa=0.0, dt=1.0, t_end=1.0, p=4,
    ),
    "advdiff_erf": dict(
        xmin=-2.5, xmax=2.5, ymin=-0.5, ymax=0.5, nx=40, ny=4, bc_x="dirichlet", bc_y="periodic",
        kappa=1e-3, dt=2.0, t_end=2.0, p=4,
    ),
    "advdiff_varvel": dict(
        xmin=-10.0, xmax=10.0, ymin=-0.25, ymax=0.25, nx=80, ny=2, bc_x="dirichlet",
        bc_y="periodic", kappa=0.1, dt=0.2, t_end=0.2, p=4, error_xmax=5.0,
    ),
    "taylor_green": dict(
        xmin=0.0, xmax=2 * pi, ymin=0.0, ymax=2 * pi, nx=8, ny=8, bc_x="periodic", bc_y="periodic",
        nu=1e-3, gravity=-9.81, dt=0.1, t_end=0.1, p=2,
    ),
    "warm_bubble": dict(
        xmin=0.0, xmax=1.0, ymin=0.0, ymax=1.0, nx=26, ny=26, bc_x="wall", bc_y="wall",
        nu=1e-6, alpha=0.0, beta=3.411223e-3, gravity=-9.81e-3, dt=10.0, t_end=800.0, p=4,
    ),
    "density_current": dict(
        xmin=0.0, xmax=25.6, ymin=0.0, ymax=6.4, nx=68, ny=17, bc_x="wall", bc_y="wall",
        nu=7.5e-5, alpha=7.5e-5, beta=3.41223e-3, gravity=-9.81e-3, dt=10.0, t_end=900.0, p=4,
    ),
}


def _coerce(name: str, text: str):
    kinds = {f.name: f.type for f in dataclasses.fields(RunConfig)}
    if name not in kinds:
        raise ConfigError(f"unknown configuration key {name!r}")
    kind = kinds[name]
    try:
        if kind in ("int", int):
            return int(text)
        if kind in ("float", float):
            return float(text)
        if kind in ("bool", bool):
            low = text.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {text!r}") from exc
    return text.strip()


def parse_pairs(pairs) -> dict:
    out = {}
    for raw in pairs:
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _coerce(key, value)
    return out


def make_config(values: dict) -> RunConfig:
    """Case defaults first, then the explicit ``values``."""
    case = values.get("case", RunConfig.case)
    merged = dict(CASE_DEFAULTS.get(case, {}))
    merged.update(values)
    return RunConfig(**merged).validate()


def load_config(path, overrides=()) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file {str(path)!r} does not exist")
    values = parse_pairs(path.read_text().splitlines())
    values.update(parse_pairs(overrides))
    return make_config(values)


# ----------------------------------------------------------------------------
# case setup
# ----------------------------------------------------------------------------


@dataclass
class CaseSetup:
    config: RunConfig
    ops: StaggeredOperators
    model: object
    state: PhysicsState
    params: ModelParams


def build_mesh(cfg: RunConfig):
    periodic = (cfg.bc_x == "periodic", cfg.bc_y == "periodic")
    if cfg.mesh_file:
        nodes, tris = read_mesh(cfg.mesh_file)
    else:
        nx, ny = cfg.nx * cfg.refine, cfg.ny * cfg.refine
        nodes, tris = generate_rect_mesh(cfg.xmin, cfg.xmax, cfg.ymin, cfg.ymax, nx, ny, cfg.grading)
        if cfg.jitter > 0.0:
            nodes = jitter_nodes(nodes, cfg, nx, ny)
    return build_staggered_mesh(nodes, tris, periodic)


def jitter_nodes(nodes, cfg: RunConfig, nx: int, ny: int, seed: int = 12345):
    """Move interior nodes by up to ``jitter`` local cell widths (fixed seed).

    Boundary nodes stay put so periodic pairing is unaffected.
    """
    rng = np.random.default_rng(seed + 1000 * nx + ny)
    hx = (cfg.xmax - cfg.xmin) / nx
    hy = (cfg.ymax - cfg.ymin) / ny
    tol = 1e-9 * max(cfg.xmax - cfg.xmin, cfg.ymax - cfg.ymin)
    x, y = nodes[:, 0], nodes[:, 1]
    inner = (x > cfg.xmin + tol) & (x < cfg.xmax - tol) & (y > cfg.ymin + tol) & (y < cfg.ymax - tol)
    shift = rng.uniform(-1.0, 1.0, nodes.shape) * cfg.jitter * np.array([hx, hy])
    out = nodes.copy()
    out[inner] += shift[inner]
    return out


def _sides(cfg: RunConfig, kind: str):
    out = []
    if cfg.bc_x == kind:
        out += [SIDE_XMIN, SIDE_XMAX]
    if cfg.bc_y == kind:
        out += [SIDE_YMIN, SIDE_YMAX]
    return tuple(out)


def build_case(cfg: RunConfig) -> CaseSetup:
    """Mesh, operators, model and initial state of a configured case."""
    mesh = build_mesh(cfg)
    ops = StaggeredOperators(mesh, cfg.p)
    prm = ModelParams(cfg.nu, cfg.alpha, cfg.kappa, cfg.beta, cfg.gravity, cfg.theta0)
    maxit = cfg.cg_maxit or None
    kw = dict(cg_tol=cfg.cg_tol, cg_maxit=maxit)
    case = cfg.case
    if case in ("nonlinear_transport", "advdiff_erf", "advdiff_varvel"):
        if case == "nonlinear_transport":
            exact = nonlinear_transport_exact

            def vel(x, t):
                return np.stack([x[..., 0], np.zeros_like(x[..., 0])], axis=-1)

        elif case == "advdiff_erf":
            kappa = cfg.kappa

            def exact(x, t):
                return advdiff_erf_exact(x, t, kappa=kappa)

            def vel(x, t):
                return np.stack([np.full_like(x[..., 0], 0.2), np.zeros_like(x[..., 0])], axis=-1)

        else:
            kappa = cfg.kappa

            def exact(x, t):
                return advdiff_varvel_exact(x, t, kappa=kappa)

            def vel(x, t):
                return np.stack([-x[..., 0], np.zeros_like(x[..., 0])], axis=-1)

        model = AdvectionDiffusionModel(
            ops, cfg.kappa, vel, _sides(cfg, "dirichlet"), exact, steady_velocity=True, **kw
        )
        state = model.initial_state(exact)
        model.exact = exact
        return CaseSetup(cfg, ops, model, state, prm)

    walls = _sides(cfg, "wall")
    if case == "taylor_green":
        nu, g = cfg.nu, cfg.gravity
        source = None
        if g != 0.0:

            def source(x, t):
                return taylor_green_source(x, t, nu=nu, g=g)

        model = NavierStokesModel(ops, prm, temperature=False, wall_sides=walls, source=source, **kw)
        state = model.initial_state(
            lambda x, t: taylor_green_exact(x, t, nu, g)[0],
            pressure=lambda x, t: taylor_green_exact(x, t, nu, g)[1],
        )
        model.exact = lambda x, t: taylor_green_exact(x, t, nu, g)[0]
        return CaseSetup(cfg, ops, model, state, prm)

    theta0 = warm_bubble_theta if case == "warm_bubble" else density_current_theta
    model = NavierStokesModel(ops, prm, temperature=True, wall_sides=walls, **kw)
    state = model.initial_state(
        lambda x, t: np.zeros(x.shape[:-1] + (2,)), theta=lambda x, t: theta0(x) + cfg.theta0
    )
    model.exact = None
    return CaseSetup(cfg, ops, model, state, prm)


# ----------------------------------------------------------------------------
# errors
# ----------------------------------------------------------------------------


def l2_error(ops: StaggeredOperators, field: np.ndarray, exact, t: float, xmax: float = 0.0) -> float:
    """``sqrt(int (u_h - u)^2)`` summed over components.

    Main fields (``N_e`` rows) use the volume rule on each triangle; dual
    fields (``N_d`` rows) use the same rule on each sub-triangle. With
    ``xmax > 0`` only triangles whose centroid satisfies ``|x| <= xmax``
    contribute.
    """
    mesh = ops.mesh
    keep = np.ones(mesh.n_elements, dtype=bool)
    if xmax > 0.0:
        keep = np.abs(mesh.centroid[:, 0]) <= xmax
    total = 0.0
    if field.shape[0] == mesh.n_elements and field.shape[1] == ops.n_phi:
        x = ops.gauss_points()
        vals = np.einsum("gk,nk...->ng...", ops.phi_gauss, field)
        diff = vals - np.asarray(exact(x, t))
        if diff.ndim == 3:
            diff = np.sum(diff**2, axis=-1)
        else:
            diff = diff**2
        w = ops.vol_rule.weights[None, :] * ops.A[:, None]
        total = float(np.sum((w * diff)[keep]))
    else:
        for g, x, w, psi in ops.dual_quadrature():
            vals = np.einsum("gk,nk...->ng...", psi, field[g.edge])
            diff = vals - np.asarray(exact(x, t))
            sq = np.sum(diff**2, axis=-1) if diff.ndim == 3 else diff**2
            total += float(np.sum((w * sq)[keep[g.tri]]))
    return float(np.sqrt(total))


def state_error(setup: CaseSetup, state: PhysicsState) -> float | None:
    exact = getattr(setup.model, "exact", None)
    if exact is None:
        return None
    fld = state.C if state.C is not None else state.v
    return l2_error(setup.ops, fld, exact, state.t, setup.config.error_xmax)


# ----------------------------------------------------------------------------
# runs
# ----------------------------------------------------------------------------


def save_snapshot(path, setup: CaseSetup, state: PhysicsState) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {k: v for k, v in dataclasses.asdict(state).items() if isinstance(v, np.ndarray)}
    cfg = json.dumps(dataclasses.asdict(setup.config), sort_keys=True)
    with open(path, "wb") as fh:
        np.savez(fh, t=np.array(state.t), config=np.array(cfg), **arrays)
    return path


def load_snapshot(path) -> tuple[RunConfig, PhysicsState]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"snapshot {str(path)!r} does not exist")
    with np.load(path, allow_pickle=False) as data:
        cfg = make_config(json.loads(str(data["config"])))
        fields = {k: data[k].copy() for k in ("C", "v", "p", "theta") if k in data.files}
        state = PhysicsState(float(data["t"]), **fields)
    return cfg, state


def n_steps(t_end: float, dt: float) -> int:
    return int(ceil(t_end / dt - 1e-9)) if t_end > 0.0 else 0


def run_case(cfg: RunConfig, resume: PhysicsState | None = None, log=None, t_stop: float | None = None) -> dict:
    """Advance a configured case to ``t_end`` and return the run report.

    The last step is shortened to land on ``t_end``. ``resume`` restarts
    from a saved state; ``t_stop`` ends the run early (used for split runs).
    """
    cfg.validate()
    t_start = time.perf_counter()
    setup = build_case(cfg)
    model, ops = setup.model, setup.ops
    state = setup.state
    if resume is not None:
        state = resume.copy()
        if state.p is not None:
            model.last_p = state.p.copy()
    tab = tableau(cfg.imex_order)
    t_final = cfg.t_end if t_stop is None else min(t_stop, cfg.t_end)
    dt = cfg.step
    steps = []
    outputs = []
    out_dir = Path(cfg.output_dir) if cfg.output_dir else None
    k = 0
    while state.t < t_final - 1e-12 * max(1.0, abs(t_final)):
        h = min(dt, t_final - state.t)
        # snap the final partial step onto the end time
        if t_final - (state.t + h) < 1e-9 * dt:
            h = t_final - state.t
        try:
            state, stats = imex_step(model, state, tab, h)
        except SolverError as exc:
            raise SolverError(f"step {k + 1} at t={state.t:.6g}: {exc}", exc.report) from exc
        k += 1
        row = {
            "step": k,
            "t": state.t,
            "diffusion_iterations": stats.diffusion_iterations,
            "pressure_iterations": stats.pressure_iterations,
        }
        if state.v is not None:
            row["divergence"] = model.last_divergence
            row["divergence_scale"] = model.last_scale
        steps.append(row)
        if log is not None:
            log(_step_line(row))
        if out_dir is not None and cfg.output_every and k % cfg.output_every == 0:
            outputs.append(str(save_snapshot(out_dir / f"snapshot_{k:05d}.npz", setup, state)))
    error = state_error(setup, state)
    report = {
        "case": cfg.case,
        "config": dataclasses.asdict(cfg),
        "n_elements": int(ops.mesh.n_elements),
        "n_edges": int(ops.mesh.n_edges),
        "r_in": float(np.mean(ops.mesh.incircle_radius)),
        "t": state.t,
        "n_steps": k,
        "l2_error": error,
        "steps": steps,
        "outputs": outputs,
        "diffusion_solves": int(sum(len(s["diffusion_iterations"]) for s in steps)),
        "pressure_solves": int(sum(len(s["pressure_iterations"]) for s in steps)),
    }
    if state.v is not None:
        report["max_divergence"] = max([s["divergence"] for s in steps], default=0.0)
        report["divergence_final"] = divergence_residual(ops, state.v)
    if out_dir is not None:
        final = save_snapshot(out_dir / "final.npz", setup, state)
        report["outputs"].append(str(final))
    if cfg.report_timings:
        report["wall_time"] = time.perf_counter() - t_start
    report["_state"] = state
    report["_setup"] = setup
    return report


def _step_line(row: dict) -> str:
    line = (
        f"step {row['step']:5d}  t={row['t']:.6g}  diff_it={sum(row['diffusion_iterations'])}"
        f"  p_it={sum(row['pressure_iterations'])}"
    )
    if "divergence" in row:
        line += f"  div={row['divergence']:.3e}"
    return line


def public_report(report: dict) -> dict:
    """Report without the in-memory state objects, ready for JSON."""
    return {k: v for k, v in report.items() if not k.startswith("_")}


def report_json(report: dict) -> str:
    return json.dumps(public_report(report), indent=2, sort_keys=True)


# ----------------------------------------------------------------------------
# convergence
# ----------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    dt: float
    r_in: float
    error: float
    order: float | None = None
    n_elements: int = 0


def observed_order(e_prev: float, e: float, dt_prev: float, dt: float) -> float:
    if e == e_prev:
        return 0.0
    return log(e_prev / e) / log(dt_prev / dt)


def _run_level(cfg: RunConfig):
    rep = run_case(cfg)
    return rep["l2_error"], rep["r_in"], rep["n_elements"]


def convergence_study(base: RunConfig, levels, workers: int | None = None) -> list[ConvergenceRow]:
    """Refine time step and mesh together and tabulate errors and orders.

    ``levels`` is a count (refinement factors ``1..levels``) or an explicit
    sequence of factors.
    """
    factors = list(range(1, levels + 1)) if isinstance(levels, int) else list(levels)
    if len(factors) < 2:
        raise ConfigError("a convergence study needs at least two levels")
    cfgs = [dataclasses.replace(base, refine=f, output_dir="").validate() for f in factors]
    workers = workers if workers is not None else thread_cap()
    if workers > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(cfgs))) as pool:
            results = list(pool.map(_run_level, cfgs))
    else:
        results = [_run_level(c) for c in cfgs]
    rows = []
    for c, (err, r_in, ne) in zip(cfgs, results):
        row = ConvergenceRow(c.step, r_in, err, None, ne)
        if rows:
            prev = rows[-1]
            row.order = observed_order(prev.error, err, prev.dt, row.dt)
        rows.append(row)
    return rows


def format_rows(rows: list[ConvergenceRow]) -> str:
    lines = [f"{'dt':>10} {'r_in':>10} {'N_e':>7} {'L2 error':>16} {'order':>6}"]
    for r in rows:
        order = "-" if r.order is None else f"{r.order:.2f}"
        lines.append(f"{r.dt:10.4g} {r.r_in:10.3e} {r.n_elements:7d} {r.error:16.9e} {order:>6}")
    return "\n".join(lines)


def thread_cap() -> int:
    raw = os.environ.get("STAGGDG_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


# ----------------------------------------------------------------------------
# export
# ----------------------------------------------------------------------------


def _lattice_triangles(p: int) -> list[tuple[int, int, int]]:
    index = {}
    for j in range(p + 1):
        for i in range(p + 1 - j):
            index[(i, j)] = len(index)
    cells = []
    for j in range(p):
        for i in range(p - j):
            cells.append((index[(i, j)], index[(i + 1, j)], index[(i, j + 1)]))
            if i + j < p - 1:
                cells.append((index[(i + 1, j)], index[(i + 1, j + 1)], index[(i, j + 1)]))
    return cells


def export_fields(ops: StaggeredOperators, state: PhysicsState, path) -> Path:
    """Write a legacy VTK ASCII unstructured grid.

    Each main triangle contributes the points of the equispaced lattice of
    degree ``max(p, 1)`` and is split into that lattice's sub-triangles.
    Point data: scalars ``C``, ``p``, ``theta`` when present and the vector
    ``v`` (main-grid projection of the dual velocity, zero third component).
    """
    path = Path(path)
    mesh = ops.mesh
    q = max(ops.p, 1)
    lat = nodal_basis(q).nodes
    phi = eval_main_basis(ops.main, lat)
    x0 = mesh.nodes[mesh.triangles[:, 0]]
    pts = x0[:, None, :] + np.einsum("nij,gj->ngi", mesh.jacobian, lat)
    npl = len(lat)
    ne = mesh.n_elements
    local = np.array(_lattice_triangles(q), dtype=np.int64)
    cells = (local[None, :, :] + npl * np.arange(ne)[:, None, None]).reshape(-1, 3)

    def at_points(c):
        return np.einsum("gk,nk...->ng...", phi, c).reshape((ne * npl,) + c.shape[2:])

    lines = [
        "# vtk DataFile Version 3.0",
        f"staggdg t={state.t:.17g}",
        "ASCII",
        "DATASET UNSTRUCTURED_GRID",
        f"POINTS {ne * npl} double",
    ]
    lines += [f"{a:.17g} {b:.17g} 0" for a, b in pts.reshape(-1, 2)]
    lines.append(f"CELLS {len(cells)} {4 * len(cells)}")
    lines += [f"3 {a} {b} {c}" for a, b, c in cells]
    lines.append(f"CELL_TYPES {len(cells)}")
    lines += ["5"] * len(cells)
    lines.append(f"POINT_DATA {ne * npl}")
    for name in ("C", "p", "theta"):
        c = getattr(state, name)
        if c is None:
            continue
        lines += [f"SCALARS {name} double 1", "LOOKUP_TABLE default"]
        lines += [f"{val:.17g}" for val in at_points(c)]
    if state.v is not None:
        vbar = at_points(ops.project_dual_to_main(state.v))
        lines.append("VECTORS v double")
        lines += [f"{a:.17g} {b:.17g} 0" for a, b in vbar]
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def read_vtk_point_data(path) -> dict:
    """Parse the files written by :func:`export_fields` back into arrays."""
    tokens = Path(path).read_text().split("\n")
    out: dict = {}
    i = 0
    while i < len(tokens):
        line = tokens[i].split()
        if not line:
            i += 1
            continue
        if line[0] == "POINTS":
            n = int(line[1])
            out["points"] = np.array([tokens[i + 1 + k].split()[:2] for k in range(n)], dtype=float)
            i += n + 1
        elif line[0] == "CELLS":
            n = int(line[1])
            out["cells"] = np.array([tokens[i + 1 + k].split()[1:] for k in range(n)], dtype=np.int64)
            i += n + 1
        elif line[0] == "SCALARS":
            n = len(out["points"])
            out[line[1]] = np.array(tokens[i + 2 : i + 2 + n], dtype=float)
            i += n + 2
        elif line[0] == "VECTORS":
            n = len(out["points"])
            out[line[1]] = np.array([tokens[i + 1 + k].split()[:2] for k in range(n)], dtype=float)
            i += n + 1
        else:
            i += 1
    return out


# ----------------------------------------------------------------------------
# self test
# ----------------------------------------------------------------------------


def selftest(seed: int = 0) -> list[tuple[str, bool, float]]:
    """Operator identities on a perturbed periodic mesh for ``p = 1..3``."""
    rng = np.random.default_rng(seed)
    nodes, tris = generate_rect_mesh(0.0, 1.0, 0.0, 1.0, 4, 4)
    inner = (nodes > 1e-12).all(axis=1) & (nodes < 1 - 1e-12).all(axis=1)
    nodes[inner] += rng.uniform(-0.06, 0.06, (int(inner.sum()), 2))
    results = []
    for periodic in ((False, False), (True, True)):
        mesh = build_staggered_mesh(nodes, tris, periodic)
        for p in (1, 2, 3):
            ops = StaggeredOperators(mesh, p)
            v = rng.standard_normal((mesh.n_edges, ops.n_psi, 2))
            c = rng.standard_normal((mesh.n_elements, ops.n_phi))
            adj = abs(np.sum(ops.divergence(v) * c) + np.sum(ops.gradient_moments(c) * v))
            results.append((f"D = -Q^T (p={p}, periodic={periodic[0]})", adj < 1e-11, adj))
            if periodic[0]:
                const = ops.zeros_dual(2)
                const[...] = rng.standard_normal(2)
                div = np.abs(ops.divergence(const)).max()
                results.append((f"div(constant) = 0 (p={p})", div < 1e-11, div))
            inv = np.abs(ops.solve_mass_dual(ops.mass_dual(v)) - v).max()
            results.append((f"dual mass inverse (p={p}, periodic={periodic[0]})", inv < 1e-11, inv))
    return results


# ----------------------------------------------------------------------------
# CLI
# ----------------------------------------------------------------------------


def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="staggdg", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one case to t_end")
    run.add_argument("config")
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    run.add_argument("--report", help="write the JSON report to this file")
    run.add_argument("--quiet", action="store_true", help="suppress per-step lines")
    conv = sub.add_parser("converge", help="refine dt and mesh together")
    conv.add_argument("config")
    conv.add_argument("--levels", type=int, default=4)
    conv.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    exp = sub.add_parser("export", help="convert a snapshot to legacy VTK")
    exp.add_argument("snapshot")
    exp.add_argument("path")
    sub.add_parser("selftest", help="check operator identities")
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "run":
            cfg = load_config(args.config, args.set)
            log = None if args.quiet else print
            report = run_case(cfg, log=log)
            text = report_json(report)
            print(text)
            if args.report:
                Path(args.report).write_text(text + "\n")
        elif args.command == "converge":
            cfg = load_config(args.config, args.set)
            rows = convergence_study(cfg, args.levels)
            print(format_rows(rows))
            print(json.dumps([dataclasses.asdict(r) for r in rows], indent=2))
        elif args.command == "export":
            cfg, state = load_snapshot(args.snapshot)
            ops = StaggeredOperators(build_mesh(cfg), cfg.p)
            print(export_fields(ops, state, args.path))
        else:
            results = selftest()
            for name, ok, val in results:
                print(f"{'PASS' if ok else 'FAIL'}  {name}  ({val:.2e})")
            return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_SOLVER
    except SolverError as exc:
        print(f"solver failure: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
