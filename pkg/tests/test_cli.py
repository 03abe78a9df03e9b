import json

import numpy as np
import pytest

from spherereg.cli import main
from spherereg.geometry import SimilarityTransform, rotation_angle_between
from spherereg.mesh import grid_patch, save_mesh


def run(*argv):
    return main([str(a) for a in argv])


def load(path):
    return json.loads(path.read_text())


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    assert run("synth", "--output", out, "--seed", 3) == 0
    return out


def test_synth_layout(dataset):
    for name in ("config.json", "cameras.json", "poses.json", "detections_analytic.json", "mesh.ply",
                 "marker_inits.json", "ground_truth.json"):
        assert (dataset / name).exists()
    dets = load(dataset / "detections_analytic.json")["detections"]
    assert all(d["marker_id"] is None for d in dets)
    # default outline density
    assert {len(d["outline"]) for d in dets} == {200}


def test_headless_pipeline(dataset, capsys):
    cfg = dataset / "config.json"
    assert run("fit-spheres", "--config", cfg) == 0
    gt = load(dataset / "ground_truth.json")
    fitted = {m["id"]: np.array(m["center_S"]) for m in load(dataset / "markers.json")["markers"]}
    for m in gt["markers"]:
        assert np.linalg.norm(fitted[m["id"]] - m["center_S"]) < 1e-4

    assert run("register", "--config", cfg) == 0
    assert "radial" in capsys.readouterr().out
    sol = load(dataset / "solution.json")
    T = SimilarityTransform.from_dict(sol["solution"]["transform"])
    G = SimilarityTransform.from_dict(gt["transform"])
    assert rotation_angle_between(T.rotation, G.rotation) < 1e-6
    assert np.linalg.norm(T.translation - G.translation) < 1e-4
    assert sorted(map(tuple, (c.values() for c in sol["correspondences"]))) == \
        sorted(map(tuple, (c.values() for c in gt["correspondences"])))

    assert run("evaluate", "--config", cfg) == 0
    rep = load(dataset / "report.json")
    assert rep["mean_radial_error_mm"] < 1e-6
    assert rep["pose_source"] == "synthetic"


def test_rerun_byte_identical(dataset, tmp_path):
    cfg = dataset / "config.json"
    run("fit-spheres", "--config", cfg)
    run("register", "--config", cfg)
    first = (dataset / "solution.json").read_bytes()
    assert run("register", "--config", cfg, "--output", tmp_path / "again.json") == 0
    assert (tmp_path / "again.json").read_bytes() == first


def test_robot_poses_and_scale(tmp_path):
    out = tmp_path / "robot"
    assert run("synth", "--output", out, "--seed", 5, "--robot", "--scale", 2.0, "--n-images", 8) == 0
    assert load(out / "poses.json")["mode"] == "robot"
    cfg = out / "config.json"
    assert run("fit-spheres", "--config", cfg) == 0
    assert run("register", "--config", cfg, "--estimate-scale") == 0
    sol = load(out / "solution.json")
    assert sol["estimate_scale"] is True
    assert sol["solution"]["transform"]["scale"] == pytest.approx(2.0, rel=1e-6)
    assert sol["report"]["pose_source"] == "robot"


def test_detect_missing_mask_exit_code(tmp_path, capsys):
    out = tmp_path / "render"
    assert run("synth", "--output", out, "--seed", 2, "--n-images", 4, "--resolution", "low", "--render") == 0
    cfg = out / "config.json"
    assert run("detect", "--config", cfg, "--threads", 2) == 0
    assert len(load(out / "detections.json")["detections"]) > 0
    victim = out / load(cfg)["images"][0]["masks"][0]["paths"][0]
    victim.unlink()
    capsys.readouterr()
    assert run("detect", "--config", cfg) == 2
    assert victim.name in capsys.readouterr().err


def test_missing_config_file(tmp_path):
    assert run("register", "--config", tmp_path / "nope.json") == 2


def test_disjoint_ids_enforced(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"registration_ids": [0, 1, 2, 3], "control_ids": [3]}))
    assert run("register", "--config", cfg) == 2


def test_unknown_config_key(tmp_path):
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps({"colour": "blue"}))
    assert run("register", "--config", cfg) == 2


def test_no_consistent_match_exit_code(dataset, tmp_path):
    rng = np.random.default_rng(1)
    fake = [{"id": k, "center_S": (rng.uniform(-400, 400, 3) * [1, 1, 0.1]).tolist(), "radius": 15.0}
            for k in range(12)]
    (tmp_path / "markers.json").write_text(json.dumps({"markers": fake}))
    cfg = load(dataset / "config.json")
    for key in ("cameras", "poses", "detections"):
        cfg[key] = str(dataset / cfg[key])
    (tmp_path / "config.json").write_text(json.dumps(cfg))
    assert run("register", "--config", tmp_path / "config.json") == 3


@pytest.mark.parametrize("gap", [0.0, 2.0])
def test_chamfer_planes(tmp_path, gap):
    save_mesh(grid_patch(1.0, 1.0), tmp_path / "a.ply")
    save_mesh(grid_patch(1.0, 1.0, origin=(0, 0, gap)), tmp_path / "b.obj")
    out = tmp_path / "cd.json"
    assert run("chamfer", tmp_path / "a.ply", tmp_path / "b.obj", "--spacing", 0.1, "--output", out) == 0
    rep = load(out)
    assert rep["cd"] == pytest.approx(gap, abs=1e-9)
    assert rep["sample_spacing"] == 0.1 and rep["outlier_cutoff"] == 20.0


def test_chamfer_unreadable_mesh(tmp_path):
    (tmp_path / "bad.ply").write_text("ply\nformat ascii 1.0\nelement vertex 3\n")
    save_mesh(grid_patch(1.0, 1.0), tmp_path / "a.ply")
    assert run("chamfer", tmp_path / "bad.ply", tmp_path / "a.ply") == 2
