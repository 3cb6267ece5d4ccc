"""End-to-end subcommand tests, in process via cli.main(argv)."""

import json
import os

import numpy as np
import pytest

from steik import cli, extract, fieldnet, metrics, pdeflow, trainer
from steik.trainer import HISTORY_COLUMNS


def _sphere_cloud(k=200, radius=0.5, seed=0):
    rng = np.random.default_rng(seed)
    n = rng.standard_normal((k, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    return radius * n, n


@pytest.fixture(scope="module")
def sphere_xyz(tmp_path_factory):
    p, n = _sphere_cloud()
    path = tmp_path_factory.mktemp("data") / "sphere.xyz"
    np.savetxt(path, np.hstack([p, n]), fmt="%.9g")
    return str(path)


@pytest.fixture(scope="module")
def fit_run(sphere_xyz, tmp_path_factory):
    out = tmp_path_factory.mktemp("fit5")
    rc = cli.main(["fit", "--input", sphere_xyz, "--preset", "srb",
                   "--iterations", "5", "--layers", "2", "--width", "8",
                   "--surface-batch", "64", "--offsurface-batch", "64",
                   "--out-dir", str(out)])
    return rc, out


@pytest.fixture(scope="module")
def trained_run(sphere_xyz, tmp_path_factory):
    # long enough that the learned field has a zero crossing in the box
    out = tmp_path_factory.mktemp("fit300")
    rc = cli.main(["fit", "--input", sphere_xyz, "--preset", "srb",
                   "--iterations", "300", "--layers", "2", "--width", "16",
                   "--surface-batch", "128", "--offsurface-batch", "128",
                   "--out-dir", str(out)])
    return rc, out


@pytest.fixture(scope="module")
def sphere_obj(tmp_path_factory):
    mesh = extract.marching_cubes(
        lambda P: np.linalg.norm(P, axis=1) - 0.5, (-0.8, 0.8), 24)
    path = tmp_path_factory.mktemp("mesh") / "sphere.obj"
    extract.save_obj(mesh, str(path))
    return str(path)


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def test_fit_writes_artifacts(fit_run):
    rc, out = fit_run
    assert rc == 0
    for name in ("checkpoint.bin", "history.csv", "manifest.json"):
        assert (out / name).exists()
    lines = (out / "history.csv").read_text().strip().splitlines()
    assert lines[0] == ",".join(HISTORY_COLUMNS)
    assert len(lines) == 1 + 5


def test_fit_manifest_reproduces_config(fit_run):
    rc, out = fit_run
    man = json.loads((out / "manifest.json").read_text())
    assert man["command"] == "fit"
    assert man["seed"] == 0
    assert man["version"]
    assert man["config"]["train"]["iterations"] == 5
    assert man["config"]["net"]["hidden_width"] == 8
    tf = man["config"]["transform"]
    assert len(tf["center"]) == 3 and tf["scale"] > 0


def test_fit_checkpoint_resumable(fit_run):
    rc, out = fit_run
    params, state, start = trainer.load_checkpoint(str(out / "checkpoint.bin"))
    assert params.config.input_dim == 3
    assert start == 5
    assert state.m.shape == state.v.shape


def test_fit_init_only(sphere_xyz, tmp_path):
    rc = cli.main(["fit", "--input", sphere_xyz, "--iterations", "0",
                   "--layers", "2", "--width", "8", "--out-dir",
                   str(tmp_path)])
    assert rc == 0
    params, _, start = trainer.load_checkpoint(str(tmp_path / "checkpoint.bin"))
    assert start == 0
    assert (tmp_path / "history.csv").read_text().strip().splitlines() == \
        [",".join(HISTORY_COLUMNS)]


def test_fit_missing_input(tmp_path):
    rc = cli.main(["fit", "--input", str(tmp_path / "nope.xyz"),
                   "--out-dir", str(tmp_path / "o")])
    assert rc == 4


def test_unknown_flag_exits_without_outputs(sphere_xyz, tmp_path):
    out = tmp_path / "o"
    with pytest.raises(SystemExit) as exc:
        cli.main(["fit", "--input", sphere_xyz, "--out-dir", str(out),
                  "--bogus-flag", "1"])
    assert exc.value.code == 2
    assert not out.exists()


def test_bad_preset_rejected(sphere_xyz, tmp_path):
    with pytest.raises(SystemExit) as exc:
        cli.main(["fit", "--input", sphere_xyz, "--preset", "nope",
                  "--out-dir", str(tmp_path)])
    assert exc.value.code == 2


def test_custom_preset_requires_weights(sphere_xyz, tmp_path):
    rc = cli.main(["fit", "--input", sphere_xyz, "--preset", "custom",
                   "--iterations", "1", "--out-dir", str(tmp_path)])
    assert rc == 2


def test_config_file_layering(sphere_xyz, tmp_path):
    cfg = tmp_path / "fit.cfg"
    cfg.write_text("# tiny run\niterations = 3\nwidth = 4\nlayers = 2\n")
    out = tmp_path / "o"
    rc = cli.main(["fit", "--input", sphere_xyz, "--config", str(cfg),
                   "--width", "8", "--surface-batch", "32",
                   "--offsurface-batch", "32", "--out-dir", str(out)])
    assert rc == 0
    man = json.loads((out / "manifest.json").read_text())
    # file supplies iterations, explicit flag beats the file for width
    assert man["config"]["train"]["iterations"] == 3
    assert man["config"]["net"]["hidden_width"] == 8


def test_config_file_unknown_key(sphere_xyz, tmp_path):
    cfg = tmp_path / "fit.cfg"
    cfg.write_text("no_such_option = 1\n")
    rc = cli.main(["fit", "--input", sphere_xyz, "--config", str(cfg),
                   "--out-dir", str(tmp_path / "o")])
    assert rc == 2


# ---------------------------------------------------------------------------
# evolve
# ---------------------------------------------------------------------------

def test_evolve_artifacts(tmp_path):
    rc = cli.main(["evolve", "--shape", "circle", "--n", "48",
                   "--alpha-d", "1.0", "--steps", "4",
                   "--snapshot-every", "2", "--out-dir", str(tmp_path)])
    assert rc == 0
    for s in (0, 2, 4):
        pgm = (tmp_path / f"step_{s:06d}.pgm").read_text()
        assert pgm.startswith("P2\n48 48\n255\n")
    diag = (tmp_path / "diagnostics.csv").read_text().strip().splitlines()
    assert diag[0] == "step,low,mid,high,max_abs,eik_residual"
    assert [int(r.split(",")[0]) for r in diag[1:]] == [0, 2, 4]
    vals = np.loadtxt(tmp_path / "grid_final.csv", delimiter=",")
    assert vals.shape == (48, 48)
    assert (tmp_path / "manifest.json").exists()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_evolve_divergence_exit_code(tmp_path):
    rc = cli.main(["evolve", "--shape", "circle", "--n", "48",
                   "--scale", "1.25", "--alpha-e", "1.0", "--dt", "1e-2",
                   "--steps", "1000", "--snapshot-every", "200",
                   "--perturb-amplitude", "1e-2", "--perturb-seed", "3",
                   "--out-dir", str(tmp_path)])
    assert rc == 3
    # partial results are still on disk for inspection
    assert (tmp_path / "diagnostics.csv").exists()
    assert (tmp_path / "grid_final.csv").exists()


def test_evolve_polygon_vertices(tmp_path):
    rc = cli.main(["evolve", "--shape", "polygon",
                   "--vertices", "0,0.6;-0.5,-0.4;0.5,-0.4",
                   "--n", "32", "--alpha-d", "1.0", "--steps", "2",
                   "--out-dir", str(tmp_path)])
    assert rc == 0


def test_evolve_polygon_missing_vertices(tmp_path):
    rc = cli.main(["evolve", "--shape", "polygon", "--steps", "1",
                   "--out-dir", str(tmp_path)])
    assert rc == 2


# ---------------------------------------------------------------------------
# extract
# ---------------------------------------------------------------------------

def test_extract_grid_contour(tmp_path):
    g = pdeflow.init_grid_sdf(pdeflow.Circle(0.5), 64, 2.0 / 64)
    grid_csv = tmp_path / "grid.csv"
    pdeflow.save_grid_csv(g, str(grid_csv))
    out = tmp_path / "contour.csv"
    rc = cli.main(["extract", "--grid", str(grid_csv), "--out", str(out)])
    assert rc == 0
    contour = extract.load_contour_csv(str(out))
    pts = np.vstack(contour.polylines)
    radii = np.linalg.norm(pts, axis=1)
    assert radii.min() > 0.49 and radii.max() < 0.501
    assert (tmp_path / "contour.csv.manifest.json").exists()


def test_extract_checkpoint_mesh(trained_run, tmp_path):
    rc, run_dir = trained_run
    assert rc == 0
    out = tmp_path / "mesh.obj"
    rc = cli.main(["extract", "--checkpoint", str(run_dir / "checkpoint.bin"),
                   "--resolution", "32", "--out", str(out)])
    assert rc == 0
    mesh = extract.load_obj(str(out))
    # the network lives in normalized coordinates; just demand a real surface
    assert mesh.n_triangles > 100
    assert np.isfinite(mesh.vertices).all()
    assert np.abs(mesh.vertices).max() <= 1.2
    assert (tmp_path / "mesh.obj.manifest.json").exists()


def test_extract_source_exclusive(tmp_path):
    assert cli.main(["extract", "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["extract", "--checkpoint", "a", "--grid", "b",
                     "--out", str(tmp_path / "o")]) == 2


def test_extract_missing_files(tmp_path):
    assert cli.main(["extract", "--checkpoint", str(tmp_path / "no.bin"),
                     "--out", str(tmp_path / "o.obj")]) == 4
    assert cli.main(["extract", "--grid", str(tmp_path / "no.csv"),
                     "--out", str(tmp_path / "o.csv")]) == 4


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def test_eval_mesh_against_itself(sphere_obj, tmp_path, capsys):
    out = tmp_path / "report.csv"
    rc = cli.main(["eval", "--mesh", sphere_obj, "--gt-mesh", sphere_obj,
                   "--samples", "500", "--occupancy-samples", "400",
                   "--out", str(out)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "d_C,d_H,d_C_one_sided,d_H_one_sided,squared_chamfer,iou"
    row = [float(v) for v in lines[1].split(",")]
    assert row[:5] == [0.0, 0.0, 0.0, 0.0, 0.0]
    assert row[5] == 1.0
    assert "d_C = 0" in capsys.readouterr().out


def test_eval_against_points(sphere_obj, tmp_path):
    p, _ = _sphere_cloud(k=400, seed=7)
    pts_path = tmp_path / "gt.xyz"
    np.savetxt(pts_path, p, fmt="%.9g")
    out = tmp_path / "report.csv"
    rc = cli.main(["eval", "--mesh", sphere_obj, "--gt-points", str(pts_path),
                   "--samples", "500", "--out", str(out)])
    assert rc == 0
    row = out.read_text().strip().splitlines()[1].split(",")
    assert float(row[0]) < 0.1        # both sets hug the same sphere
    assert row[5] == ""               # no occupancy requested


def test_eval_occupancy_needs_mesh(sphere_obj, tmp_path):
    p, _ = _sphere_cloud(k=50)
    pts_path = tmp_path / "gt.xyz"
    np.savetxt(pts_path, p, fmt="%.9g")
    rc = cli.main(["eval", "--mesh", sphere_obj, "--gt-points", str(pts_path),
                   "--occupancy-samples", "100",
                   "--out", str(tmp_path / "o.csv")])
    assert rc == 2


def test_eval_gt_source_exclusive(sphere_obj, tmp_path):
    rc = cli.main(["eval", "--mesh", sphere_obj,
                   "--out", str(tmp_path / "o.csv")])
    assert rc == 2


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def test_gradcheck_passes(capsys):
    rc = cli.main(["gradcheck"])
    out = capsys.readouterr().out
    assert rc == 0
    assert "max relative error" in out


def test_gradcheck_bad_step_fails(capsys):
    rc = cli.main(["gradcheck", "--step", "10.0"])
    assert rc == 3


def test_gradcheck_selected_terms(capsys):
    rc = cli.main(["gradcheck", "--terms", "eikonal,divergence",
                   "--net", "linear"])
    assert rc == 0


def test_gradcheck_unknown_term():
    rc = cli.main(["gradcheck", "--terms", "bogus"])
    assert rc == 2


# ---------------------------------------------------------------------------
# ablate
# ---------------------------------------------------------------------------

def test_ablate_matrix_csv(tmp_path):
    out = tmp_path / "ablate.csv"
    rc = cli.main(["ablate", "--points", "300", "--iterations", "5",
                   "--out", str(out)])
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0].startswith("# reference")
    assert lines[1] == "eik,reg,final_total,final_eikonal,final_divergence,finite"
    cells = [ln.split(",") for ln in lines[2:]]
    assert [(c[0], c[1]) for c in cells] == \
        [("L1", "L1"), ("L1", "L2"), ("L2", "L1"), ("L2", "L2")]
    assert all(c[5] == "true" for c in cells)
    assert all(np.isfinite(float(c[2])) for c in cells)


def test_ablate_bad_matrix(tmp_path):
    rc = cli.main(["ablate", "--matrix", "eik=L3;reg=L1",
                   "--out", str(tmp_path / "o.csv")])
    assert rc == 2


# ---------------------------------------------------------------------------
# threads
# ---------------------------------------------------------------------------

def test_threads_env_then_flag(monkeypatch):
    monkeypatch.setenv("STEIK_THREADS", "3")
    assert cli.main(["gradcheck", "--layers", "1", "--width", "4",
                     "--coords", "5"]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "3"
    assert cli.main(["--threads", "2", "gradcheck", "--layers", "1",
                     "--width", "4", "--coords", "5"]) == 0
    assert os.environ["OMP_NUM_THREADS"] == "2"
    for var in cli._THREAD_VARS:
        assert os.environ[var] == "2"


def test_threads_invalid():
    assert cli.main(["--threads", "0", "gradcheck"]) == 2
