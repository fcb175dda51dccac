import json

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from voxfield import cli
from voxfield.geometry import Transform
from voxfield.io import InputError, load_scans, read_point_cloud, read_trajectory, write_point_cloud
from voxfield.sim import CameraModel, parse_world, render_depth
from voxfield.voxel_store import LayerKind, load_layer, read_header

WORLD = "bounds -3 -3 -3 3 3 3\nsphere 0 0 0 0.8\n"
CAM = CameraModel(width=64, height=48, fx=40, fy=40, cx=32, cy=24)


@pytest.fixture
def dataset(tmp_path):
    world = parse_world(WORLD)
    scans = tmp_path / "scans"
    scans.mkdir()
    lines = []
    for i, eye in enumerate([(2.5, 0, 0), (0, 2.5, 0.3), (-2.5, 0.2, 0)]):
        pose = Transform.look_at(eye, (0, 0, 0))
        scan = render_depth(world, pose, CAM)
        write_point_cloud(scans / f"{i:03d}.ply", scan.points, np.full((len(scan), 3), 100))
        q = Rotation.from_matrix(pose.rotation).as_quat()
        lines.append(" ".join(map(str, [float(i), *pose.translation, *q])))
    traj = tmp_path / "traj.txt"
    traj.write_text("# t x y z qx qy qz qw\n" + "\n".join(lines) + "\n")
    return scans, traj


def run(capsys, *argv):
    code = cli.main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def effective(err):
    line = next(l for l in err.splitlines() if l.startswith("effective config: "))
    return json.loads(line[len("effective config: "):])


def test_point_cloud_roundtrip(tmp_path):
    pts = np.random.default_rng(0).normal(size=(50, 3))
    write_point_cloud(tmp_path / "p.ply", pts, np.arange(150).reshape(50, 3))
    back, colors = read_point_cloud(tmp_path / "p.ply")
    np.testing.assert_allclose(back, pts.astype(np.float32))
    assert colors[1].tolist() == [3, 4, 5]
    (tmp_path / "a.ply").write_text("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n"
                                    "property float y\nproperty float z\nend_header\n1 2 3\n4 5 6\n")
    back, colors = read_point_cloud(tmp_path / "a.ply")
    assert back.tolist() == [[1, 2, 3], [4, 5, 6]] and colors is None
    (tmp_path / "bad.ply").write_text("not a ply")
    with pytest.raises(InputError):
        read_point_cloud(tmp_path / "bad.ply")


def test_trajectory_errors(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0 0 0 0 0 0 0 2\n")
    with pytest.raises(InputError, match="unit"):
        read_trajectory(p)
    p.write_text("0 0 0 0 0 0 1\n")
    with pytest.raises(InputError, match="8 fields"):
        read_trajectory(p)


def test_trajectory_pose(tmp_path):
    p = tmp_path / "t.txt"
    p.write_text("0 1 2 3 0 0 0.7071067811865476 0.7071067811865476\n")
    (pose,) = read_trajectory(p)
    np.testing.assert_allclose(pose.apply(np.array([[1.0, 0, 0]])), [[1, 3, 3]], atol=1e-12)


def test_load_scans_errors(tmp_path, dataset):
    scans, traj = dataset
    empty = tmp_path / "empty"
    empty.mkdir()
    with pytest.raises(InputError, match="no scans found"):
        load_scans(empty, traj)
    traj.write_text(traj.read_text().splitlines()[1] + "\n")
    with pytest.raises(InputError, match="1 poses but 3 scans"):
        load_scans(scans, traj)


def test_integrate_mesh_slice_info(tmp_path, dataset, capsys):
    scans, traj = dataset
    tsdf, esdf = tmp_path / "map.tsdf", tmp_path / "map.esdf"
    code, out, err = run(capsys, "integrate", scans, traj, "--out", tsdf, "--esdf-out", esdf,
                         "--voxel-size", 0.1, "--d-max", 1.0)
    assert code == 0, err
    assert effective(err)["voxel_size"] == 0.1
    assert load_layer(tsdf).kind == LayerKind.TSDF and load_layer(esdf).kind == LayerKind.ESDF

    code, out, err = run(capsys, "mesh", tsdf, "--out", tmp_path / "m.ply")
    assert code == 0 and "triangles" in out
    code, out, err = run(capsys, "slice", esdf, "--axis", "z", "--coordinate", 0.0, "--out", tmp_path / "s.csv")
    assert code == 0
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert len(rows) > 10
    vals = [float(c) for r in rows[1:] for c in r.split(",")[2:] if c != "nan"]
    assert min(vals) < 0 < max(vals)

    code, out, _ = run(capsys, "info", tsdf)
    assert code == 0 and "kind: TSDF" in out and "voxel_size: 0.1" in out

    code, _, err = run(capsys, "mesh", esdf, "--out", tmp_path / "x.ply")
    assert code == 1 and "needs TSDF" in err and not (tmp_path / "x.ply").exists()
    code, _, err = run(capsys, "info", tmp_path / "missing")
    assert code == 1


def test_config_precedence(tmp_path, dataset, capsys):
    scans, traj = dataset
    conf = tmp_path / "c.json"
    conf.write_text(json.dumps({"voxel_size": 0.2, "merge": "simple", "d_max": 3.0}))
    code, _, err = run(capsys, "integrate", scans, traj, "--out", tmp_path / "m", "--config", conf,
                       "--voxel-size", 0.15)
    assert code == 0
    eff = effective(err)
    assert eff["voxel_size"] == 0.15  # flag beats file
    assert eff["merge"] == "simple" and eff["d_max"] == 3.0  # file beats default
    assert eff["weight"] == "z2-dropoff" and eff["truncation_mult"] == 4  # defaults
    assert read_header(tmp_path / "m")["voxel_size"] == 0.15
    conf.write_text(json.dumps({"voxel_sise": 0.2}))
    code, _, err = run(capsys, "integrate", scans, traj, "--out", tmp_path / "m2", "--config", conf)
    assert code == 1 and "voxel_sise" in err


def test_conflicting_flags(tmp_path, dataset, capsys):
    scans, traj = dataset
    code, _, err = run(capsys, "integrate", scans, traj, "--out", tmp_path / "m",
                       "--voxel-size", 0.2, "--esdf-band", "half-trunc", "--d-max", 0.3)
    assert code == 1 and "--d-max" in err and "--esdf-band" in err
    assert not (tmp_path / "m").exists()
    code, _, err = run(capsys, "integrate", scans, traj, "--out", tmp_path / "m", "--voxel-size", -1)
    assert code == 1


def test_input_errors_exit_nonzero(tmp_path, dataset, capsys):
    scans, traj = dataset
    empty = tmp_path / "none"
    empty.mkdir()
    code, _, err = run(capsys, "integrate", empty, traj, "--out", tmp_path / "m")
    assert code == 1 and "no scans found" in err
    with pytest.raises(SystemExit) as exc:
        cli.main(["slice", "x", "--axis", "w", "--coordinate", "0", "--out", "y"])
    assert exc.value.code == 2


def test_partial_outputs_removed_on_error(tmp_path, dataset, capsys, monkeypatch):
    scans, traj = dataset

    def broken(layer, path):
        with open(path, "wb") as fh:
            fh.write(b"partial")
        raise OSError("disk full")

    monkeypatch.setattr(cli, "save_layer", broken)
    code, _, err = run(capsys, "integrate", scans, traj, "--out", tmp_path / "m", "--esdf-out", tmp_path / "e")
    assert code == 1 and "disk full" in err
    assert sorted(p.name for p in tmp_path.iterdir()) == ["scans", "traj.txt"]


def test_existing_output_kept_on_error(tmp_path, dataset, capsys, monkeypatch):
    scans, traj = dataset
    target = tmp_path / "m"
    target.write_bytes(b"old")
    monkeypatch.setattr(cli, "save_layer", lambda layer, path: (_ for _ in ()).throw(OSError("boom")))
    assert run(capsys, "integrate", scans, traj, "--out", target)[0] == 1
    assert target.read_bytes() == b"old"


def test_empty_layer_mesh(tmp_path, capsys):
    from voxfield.voxel_store import Layer, save_layer

    save_layer(Layer(0.1), tmp_path / "empty")
    code, out, _ = run(capsys, "mesh", tmp_path / "empty", "--out", tmp_path / "e.ply")
    assert code == 0 and "wrote 0 triangles" in out


def test_error_analysis_outputs(tmp_path, capsys):
    code, out, _ = run(capsys, "error-analysis", "--out", tmp_path, "--trials", 2000)
    assert code == 0
    names = sorted(p.name for p in tmp_path.iterdir())
    assert names == ["monte_carlo.csv", "projective_residual.csv", "quasi_euclidean_residual.csv"]
    mc = [l for l in (tmp_path / "monte_carlo.csv").read_text().splitlines() if not l.startswith("#")]
    assert mc[0].startswith("n_obs")
    code, _, err = run(capsys, "error-analysis", "--out", tmp_path / "nope")
    assert code == 1 and "does not exist" in err


def test_collision_model_monotone(tmp_path, capsys):
    out = tmp_path / "c.csv"
    code, _, _ = run(capsys, "collision-model", "--out", out)
    assert code == 0
    import csv

    rows = list(csv.DictReader(out.open()))
    assert len(rows) == 100
    for r in rows:
        assert int(r["n_esdf_min"]) <= int(r["n_esdf_max"]) <= int(r["n_occupancy"])
    code, _, err = run(capsys, "collision-model", "--out", out, "--radius", "1:0:0.1")
    assert code == 1


def test_sim_bench_small(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    code, stdout, err = run(capsys, "sim-bench", "--viewpoints", 3, "--voxel-size", 0.2, "--d-max", 2.0,
                            "--out", out)
    assert code == 0, err
    rows = out.read_text().splitlines()
    assert rows[0].startswith("voxel_size,variant,rms") and len(rows) == 6
    assert (tmp_path / "bench.timings.csv").exists()
