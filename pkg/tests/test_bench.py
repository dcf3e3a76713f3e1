import csv
import json
from pathlib import Path

import numpy as np
import pytest

from hgmmreg import bench
from hgmmreg.cli import main
from hgmmreg.geom import RigidTransform, euler_xyz_to_matrix
from hgmmreg.gmmtree import ModelConfig, build_tree
from hgmmreg.io import SyntheticTransformSpec, synthetic_object, unit_normalize, write_cloud

GOLDEN = Path(__file__).parent / "golden"


@pytest.mark.parametrize("columns,name", [
    (bench.SWEEP_COLUMNS, "sweep_header.csv"),
    (bench.SEQUENCE_COLUMNS, "sequence_header.csv"),
    (bench.TRAJECTORY_COLUMNS, "trajectory_header.csv"),
])
def test_csv_schema_golden(tmp_path, columns, name):
    bench.write_rows([], tmp_path / "x.csv", columns)
    assert (tmp_path / "x.csv").read_text() == (GOLDEN / name).read_text()


def test_identity_trial_row(object_cloud):
    rows = bench.run_synthetic_sweep(object_cloud, [1000], SyntheticTransformSpec(0, 0, trials=1), ["adaptive:2"])
    assert len(rows) == 1
    assert rows[0].rotation_error_deg <= 1e-3 and rows[0].converged


def test_sweep_rows_and_work_column(object_cloud, tmp_path):
    spec = SyntheticTransformSpec(trials=2)
    rows = bench.run_synthetic_sweep(object_cloud, [1000], spec, ["adaptive:3", "flat:512", "flat:5000"])
    assert len(rows) == 6
    by = {}
    for r in rows:
        by.setdefault(r.variant, []).append(r)
    assert all(r.density_evaluations <= 24 * r.n_points for r in by["Adaptive L3"])
    assert all(r.density_evaluations == 512 * r.n_points for r in by["GMM J=512"])
    # a failing variant is recorded, the sweep goes on
    assert all(r.status.startswith("error") for r in by["GMM J=5000"])
    bench.write_rows(rows, tmp_path / "s.csv", bench.SWEEP_COLUMNS)
    bench.write_json(rows, tmp_path / "s.json", bench.SWEEP_COLUMNS)
    with open(tmp_path / "s.csv") as f:
        back = list(csv.DictReader(f))
    assert len(back) == 6 and float(back[0]["model_build_seconds"]) >= 0
    data = json.loads((tmp_path / "s.json").read_text())
    assert data["columns"] == list(bench.SWEEP_COLUMNS) and len(data["rows"]) == 6


def test_sweep_jobs_do_not_change_rows(object_cloud):
    spec = SyntheticTransformSpec(trials=3)
    a = bench.run_synthetic_sweep(object_cloud, [800], spec, ["adaptive:2"], jobs=1)
    b = bench.run_synthetic_sweep(object_cloud, [800], spec, ["adaptive:2"], jobs=3)
    assert [r.rotation_error_deg for r in a] == [r.rotation_error_deg for r in b]


def test_cli_sweep_byte_identical(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    args = ["sweep", "--sizes", "600", "--trials", "2", "--variant", "adaptive:2", "--variant", "icp",
            "--no-timing", "--jobs", "2"]
    assert main(args + ["-o", "a"]) == 0
    assert main(args + ["-o", "b"]) == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a.csv")))
    assert rows[0]["model_build_seconds"] == "" and rows[0]["em_seconds"] == ""


@pytest.fixture(scope="module")
def trajectory_frames():
    world = unit_normalize(synthetic_object(8000, seed=3))
    poses = []
    for k in range(10):
        m = np.eye(4)
        m[:3, :3] = euler_xyz_to_matrix(np.radians([1.0 * k, -0.5 * k, 2.0 * k]))
        m[:3, 3] = [0.01 * k, 0.005 * k, 0.0]
        poses.append(m)
    frames = [world.transformed(RigidTransform(m[:3, :3], m[:3, 3]).inverse()) for m in poses]
    return frames, poses


def test_sequence_duplicate_frames(object_cloud):
    res = bench.run_sequence([object_cloud, object_cloud], 1, 5000, "adaptive:3", [np.eye(4), np.eye(4)])
    assert len(res.rows) == 1
    assert res.rows[0].rotation_error_deg <= 1e-3


def test_sequence_known_trajectory(trajectory_frames, tmp_path):
    frames, poses = trajectory_frames
    np.savetxt(tmp_path / "poses.txt", np.array([p.ravel() for p in poses]))
    res = bench.run_sequence(frames, 1, 5000, "adaptive:3", tmp_path / "poses.txt")
    err = np.array([r.rotation_error_deg for r in res.rows])
    assert len(err) == 9 and err.mean() <= 0.2
    end = res.trajectory[9]
    gt_end = np.linalg.solve(poses[0], poses[9])
    end_err = np.degrees(np.arccos(np.clip((np.trace(end[:3, :3].T @ gt_end[:3, :3]) - 1) / 2, -1, 1)))
    assert end_err <= 10 * err.mean() * len(err)


def test_sequence_unreadable_frame(trajectory_frames, tmp_path):
    frames, poses = trajectory_frames
    paths = []
    for k, f in enumerate(frames[:4]):
        write_cloud(f, tmp_path / f"{k}.ply")
        paths.append(tmp_path / f"{k}.ply")
    (tmp_path / "2.ply").write_bytes(b"ply\nformat ascii 1.0\nelement vertex 5\n")
    res = bench.run_sequence(paths, 1, 3000, "adaptive:2", poses[:4])
    status = [r.status for r in res.rows]
    assert status[1].startswith("skipped") and status[2].startswith("skipped")
    assert status[0] == "converged" and 3 in res.trajectory and 2 not in res.trajectory
    bench.write_rows(res.trajectory_rows(), tmp_path / "t.csv", bench.TRAJECTORY_COLUMNS)
    assert len((tmp_path / "t.csv").read_text().splitlines()) == 4


def test_read_poses_formats(tmp_path):
    rng = np.random.default_rng(0)
    mats = [np.vstack([rng.standard_normal((3, 4)), [0, 0, 0, 1]]) for _ in range(3)]
    (tmp_path / "a.txt").write_text("\n".join(" ".join(repr(float(v)) for v in m.ravel()) for m in mats) + "\n")
    log = "".join(f"{k} {k} {k + 1}\n" + "".join(" ".join(repr(float(v)) for v in row) + "\n" for row in m)
                  for k, m in enumerate(mats))
    (tmp_path / "b.log").write_text(log)
    for name in ("a.txt", "b.log"):
        back = bench.read_poses(tmp_path / name)
        assert len(back) == 3 and all(np.array_equal(x, y) for x, y in zip(back, mats))


def test_invariant_suite_default_passes():
    report = bench.run_invariant_suite(0)
    assert report.passed, report.failed()
    d = json.loads(report.to_json())
    assert d["passed"] and len(d["entries"]) == len(report.entries)


def test_invariant_suite_negative_control():
    pts = np.random.default_rng(0).standard_normal((3000, 3))
    tree = build_tree(pts, ModelConfig(max_level=2))
    report = bench.run_invariant_suite(0, tree=bench.corrupt_tree(tree))
    assert "gmmtree.moment_matching" in report.failed()


def test_invariant_suite_seed_stability():
    names = {tuple(bench.run_invariant_suite(s).passed_names()) for s in range(10)}
    assert len(names) == 1


def test_cli_register_and_invariants(tmp_path, capsys, object_5k):
    t = RigidTransform(euler_xyz_to_matrix(np.radians([0, 0, 10])), [0.02, 0, 0])
    write_cloud(object_5k, tmp_path / "t.ply")
    write_cloud(object_5k.transformed(t), tmp_path / "s.xyz", "xyz-text")
    assert main(["register", str(tmp_path / "t.ply"), str(tmp_path / "s.xyz")]) == 0
    m = np.loadtxt(capsys.readouterr().out.splitlines())
    assert m.shape == (4, 4) and np.allclose(m, t.inverse().matrix(), atol=1e-2)
    assert main(["invariants", "-o", str(tmp_path / "inv.json")]) == 0
    assert json.loads((tmp_path / "inv.json").read_text())["passed"]


def test_cli_sequence(tmp_path, monkeypatch, trajectory_frames):
    frames, poses = trajectory_frames
    d = tmp_path / "frames"
    d.mkdir()
    for k, f in enumerate(frames[:3]):
        write_cloud(f, d / f"{k:03d}.ply")
    np.savetxt(tmp_path / "gt.txt", np.array([p.ravel() for p in poses[:3]]))
    monkeypatch.chdir(tmp_path)
    assert main(["sequence", str(d), "--step", "1", "--downsample", "2000", "--L", "2",
                 "--gt", str(tmp_path / "gt.txt"), "-o", "seq"]) == 0
    assert len((tmp_path / "seq.csv").read_text().splitlines()) == 3
    assert (tmp_path / "seq_trajectory.csv").exists()
