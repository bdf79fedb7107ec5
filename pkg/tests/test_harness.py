import dataclasses
import json
from pathlib import Path

import numpy as np
import pytest

from staggdg.harness import (
    EXIT_CONFIG,
    EXIT_OK,
    EXIT_SOLVER,
    ConfigError,
    RunConfig,
    build_case,
    convergence_study,
    export_fields,
    l2_error,
    load_config,
    load_snapshot,
    main,
    make_config,
    n_steps,
    observed_order,
    parse_pairs,
    public_report,
    read_vtk_point_data,
    run_case,
    save_snapshot,
    selftest,
)
from staggdg.mesh import build_staggered_mesh
from staggdg.models import PhysicsState
from staggdg.operators import StaggeredOperators


def small_tg(**kw):
    base = dict(case="taylor_green", nx=3, ny=3, p=1, dt=0.2, t_end=0.4, imex_order=1)
    base.update(kw)
    return make_config(base)


def test_parse_pairs_and_comments():
    out = parse_pairs(["# header", "p = 3  # degree", "", "case=advdiff_erf", "report_timings = yes"])
    assert out == {"p": 3, "case": "advdiff_erf", "report_timings": True}
    with pytest.raises(ConfigError):
        parse_pairs(["colour = blue"])
    with pytest.raises(ConfigError):
        parse_pairs(["p 3"])
    with pytest.raises(ConfigError):
        parse_pairs(["p = three"])


def test_case_defaults_and_overrides():
    cfg = make_config({"case": "advdiff_varvel", "p": 2})
    assert cfg.p == 2 and cfg.kappa == 0.1 and cfg.error_xmax == 5.0
    assert RunConfig().validate().case == "taylor_green"


@pytest.mark.parametrize(
    "bad",
    [
        {"case": "nope"},
        {"p": 7},
        {"imex_order": 3},
        {"dt": 0.0},
        {"bc_x": "sticky"},
        {"nu": -1.0},
        {"jitter": 0.6},
        {"grading": 0.5},
        {"nx": 0},
        {"mesh_file": "/does/not/exist.mesh"},
    ],
)
def test_invalid_configs_raise(bad):
    with pytest.raises(ConfigError):
        make_config(bad)


def test_load_config_file(tmp_path):
    f = tmp_path / "run.cfg"
    f.write_text("case = taylor_green\nnx = 3\nny = 3\np = 1\n")
    cfg = load_config(f, ["dt=0.05"])
    assert cfg.nx == 3 and cfg.dt == 0.05 and cfg.nu == 1e-3
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.cfg")


def test_n_steps():
    assert n_steps(0.0, 0.1) == 0
    assert n_steps(1.0, 0.1) == 10
    assert n_steps(1.0, 0.3) == 4


def test_zero_step_run_returns_initial_state():
    cfg = small_tg(t_end=0.0)
    rep = run_case(cfg)
    assert rep["n_steps"] == 0 and rep["steps"] == []
    init = build_case(cfg).state
    assert np.array_equal(rep["_state"].v, init.v)


def test_partial_last_step_lands_on_end_time():
    rep = run_case(small_tg(dt=0.3, t_end=0.4))
    assert rep["n_steps"] == 2
    assert rep["t"] == pytest.approx(0.4, abs=1e-14)


def test_runs_are_deterministic():
    a = json.dumps(public_report(run_case(small_tg())), sort_keys=True)
    b = json.dumps(public_report(run_case(small_tg())), sort_keys=True)
    assert a == b


def test_restart_from_snapshot_matches_straight_run(tmp_path):
    cfg = small_tg(t_end=0.6)
    full = run_case(cfg)["_state"]
    half = run_case(cfg, t_stop=0.2)
    path = save_snapshot(tmp_path / "mid.npz", half["_setup"], half["_state"])
    cfg2, state = load_snapshot(path)
    assert cfg2 == cfg
    rest = run_case(cfg2, resume=state)["_state"]
    assert rest.t == pytest.approx(full.t)
    assert np.max(np.abs(rest.v - full.v)) < 1e-12
    with pytest.raises(ConfigError):
        load_snapshot(tmp_path / "none.npz")


def test_divergence_recorded_every_step():
    rep = run_case(small_tg(t_end=0.6))
    assert len(rep["steps"]) == 3
    for row in rep["steps"]:
        assert row["divergence"] <= 10 * 1e-10 * row["divergence_scale"]


def test_observed_order():
    assert observed_order(1.0, 1.0, 0.2, 0.1) == 0.0
    assert observed_order(4.0, 1.0, 0.2, 0.1) == pytest.approx(2.0)


def test_l2_error_trivial_cases(open_mesh):
    ops = StaggeredOperators(open_mesh, 2)
    c = ops.project_function_main(lambda x: x[..., 0] * x[..., 1])
    assert l2_error(ops, c, lambda x, t: x[..., 0] * x[..., 1], 0.0) < 1e-13
    one = np.ones((open_mesh.n_elements, ops.n_phi))
    assert l2_error(ops, one, lambda x, t: np.zeros(x.shape[:-1]), 0.0) == pytest.approx(1.0)
    v = ops.zeros_dual(2)
    v[...] = [3.0, 4.0]
    assert l2_error(ops, v, lambda x, t: np.zeros(x.shape), 0.0) == pytest.approx(5.0)


def test_l2_error_window(open_mesh):
    ops = StaggeredOperators(open_mesh, 1)
    one = np.ones((open_mesh.n_elements, ops.n_phi))
    zero = lambda x, t: np.zeros(x.shape[:-1])  # noqa: E731
    assert l2_error(ops, one, zero, 0.0, xmax=0.5) < l2_error(ops, one, zero, 0.0)


def test_convergence_study_serial():
    rows = convergence_study(small_tg(t_end=0.2, imex_order=0), 2, workers=1)
    assert len(rows) == 2 and rows[0].order is None
    assert rows[1].dt == pytest.approx(0.1)
    assert rows[1].error < rows[0].error
    with pytest.raises(ConfigError):
        convergence_study(small_tg(), 1)


def test_vtk_roundtrip(tmp_path, open_mesh):
    ops = StaggeredOperators(open_mesh, 2)
    c = ops.project_function_main(lambda x: 1 + x[..., 0] ** 2)
    v = ops.project_function_dual(lambda x: np.stack([x[..., 1], -x[..., 0]], -1))
    path = export_fields(ops, PhysicsState(0.5, C=c, v=v), tmp_path / "out" / "f.vtk")
    data = read_vtk_point_data(path)
    pts = data["points"]
    assert np.allclose(data["C"], 1 + pts[:, 0] ** 2, atol=1e-12)
    assert data["v"].shape == pts.shape
    assert data["cells"].max() < len(pts)


def test_vtk_constant_on_one_element(tmp_path):
    mesh = build_staggered_mesh(np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]]), np.array([[0, 1, 2]]))
    ops = StaggeredOperators(mesh, 0)
    data = read_vtk_point_data(export_fields(ops, PhysicsState(0.0, p=np.full((1, 1), 7.0)), tmp_path / "one.vtk"))
    assert len(data["points"]) == 3 and len(data["cells"]) == 1
    assert np.all(data["p"] == 7.0)


def test_selftest_passes():
    results = selftest()
    assert results and all(ok for _, ok, _ in results)


def test_cli_run_and_errors(tmp_path, capsys):
    cfg = tmp_path / "tg.cfg"
    cfg.write_text("case = taylor_green\nnx = 3\nny = 3\np = 1\ndt = 0.2\nt_end = 0.2\n")
    report = tmp_path / "report.json"
    assert main(["run", str(cfg), "--quiet", "--report", str(report)]) == EXIT_OK
    data = json.loads(report.read_text())
    assert data["n_steps"] == 1 and data["case"] == "taylor_green"
    assert main(["run", str(cfg), "--set", "p=9"]) == EXIT_CONFIG
    assert main(["run", str(tmp_path / "missing.cfg")]) == EXIT_CONFIG
    assert main(["run", str(cfg), "--quiet", "--set", "cg_tol=1e-15", "--set", "cg_maxit=1"]) == EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


def test_cli_export_and_selftest(tmp_path, capsys):
    cfg = small_tg(t_end=0.2, output_dir=str(tmp_path / "snap"))
    rep = run_case(cfg)
    snap = rep["outputs"][-1]
    assert main(["export", snap, str(tmp_path / "v.vtk")]) == EXIT_OK
    assert "v" in read_vtk_point_data(tmp_path / "v.vtk")
    assert main(["selftest"]) == EXIT_OK
    assert "FAIL" not in capsys.readouterr().out


def test_config_dataclass_roundtrip():
    cfg = small_tg()
    again = make_config(dataclasses.asdict(cfg))
    assert again == cfg


def test_shipped_configs_load():
    files = sorted((Path(__file__).parent.parent / "configs").glob("*.cfg"))
    assert len(files) == 6
    assert {load_config(f).case for f in files} == {
        "nonlinear_transport", "advdiff_erf", "advdiff_varvel", "taylor_green", "warm_bubble", "density_current",
    }
