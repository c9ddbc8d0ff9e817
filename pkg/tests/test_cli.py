import json
import subprocess
import sys

import pytest

from geomae.cli import main
from geomae.pointcloud_io import read_targets
from geomae.scene_synth import random_scene_spec

GRID = ["--range-min", "0,0,-1", "--range-max", "8,8,3", "--voxel-size", "0.5,0.5,4"]


@pytest.fixture
def scene(tmp_path):
    spec = tmp_path / "scene.json"
    spec.write_text(json.dumps(random_scene_spec(5, density=40.0).to_dict()))
    pts = tmp_path / "scene.csv"
    assert main(["synth", "--spec", str(spec), "--out", str(pts)]) == 0
    return spec, pts


def _last_json(capsys):
    return json.loads(capsys.readouterr().out.strip().splitlines()[-1])


def test_help_exits_zero():
    out = subprocess.run([sys.executable, "-m", "geomae", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gen-targets" in out.stdout


@pytest.mark.parametrize("sub", ["synth", "gen-targets", "pretrain", "verify", "inspect"])
def test_subcommand_help(sub):
    with pytest.raises(SystemExit) as info:
        main([sub, "--help"])
    assert info.value.code == 0


def test_synth_deterministic_and_missing_spec(tmp_path, scene):
    spec, pts = scene
    again = tmp_path / "again.csv"
    assert main(["synth", "--spec", str(spec), "--out", str(again)]) == 0
    assert again.read_bytes() == pts.read_bytes() and pts.stat().st_size > 0
    assert main(["synth", "--spec", str(tmp_path / "nope.json"), "--out", str(again)]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["synth", "--spec", str(bad), "--out", str(again)]) == 2


def test_synth_binary_format(tmp_path, scene):
    spec, _ = scene
    out = tmp_path / "s.bin"
    assert main(["synth", "--spec", str(spec), "--out", str(out), "--format", "xyzi_bin"]) == 0
    assert out.stat().st_size % 16 == 0


def test_gen_targets_preset_header_and_count(tmp_path, scene, capsys):
    _, pts = scene
    out = tmp_path / "t.gmt"
    capsys.readouterr()
    assert main(["gen-targets", "--points", str(pts), "--preset", "nuscenes", "--out", str(out)]) == 0
    summary = _last_json(capsys)
    tf = read_targets(out)
    assert tf.voxel_size == (0.256, 0.256, 8.0)
    assert tf.count == round(0.7 * summary["voxels"]) == summary["masked"]
    assert 0.0 <= summary["valid_surface_fraction"] <= 1.0


def test_gen_targets_grid_errors(tmp_path, scene):
    _, pts = scene
    out = str(tmp_path / "t.gmt")
    base = ["gen-targets", "--points", str(pts), "--out", out]
    assert main(base + ["--preset", "waymo", "--voxel-size", "1,1,1"]) == 3
    assert main(base + ["--range-min", "0,0,0", "--range-max", "1,1,1", "--voxel-size", "0.3,0.3,1"]) == 3
    assert main(base + ["--range-min", "0,0", "--range-max", "1,1,1", "--voxel-size", "1,1,1"]) == 3
    assert main(base) == 3
    assert main(["gen-targets", "--points", str(tmp_path / "missing.csv"), "--out", out, "--preset", "waymo"]) == 2


def test_gen_targets_threads_env(tmp_path, scene, monkeypatch):
    _, pts = scene
    monkeypatch.setenv("GEOMAE_THREADS", "4")
    a, b = tmp_path / "a.gmt", tmp_path / "b.gmt"
    assert main(["gen-targets", "--points", str(pts), *GRID, "--out", str(a)]) == 0
    assert main(["gen-targets", "--points", str(pts), *GRID, "--out", str(b), "--threads", "1"]) == 0
    assert a.read_bytes() == b.read_bytes()


def test_verify_ok_corrupt_and_empty(tmp_path, scene, capsys):
    _, pts = scene
    out = tmp_path / "t.gmt"
    assert main(["gen-targets", "--points", str(pts), *GRID, "--seed", "3", "--out", str(out)]) == 0
    assert main(["verify", "--points", str(pts), *GRID, "--seed", "3", "--targets", str(out)]) == 0
    report = _last_json(capsys)
    assert report["ok"] and report["surface.eigenvalue_max_abs"] <= 1e-10
    raw = bytearray(out.read_bytes())
    raw[300] ^= 0x40
    bad = tmp_path / "bad.gmt"
    bad.write_bytes(bytes(raw))
    assert main(["verify", "--points", str(pts), *GRID, "--seed", "3", "--targets", str(bad)]) != 0
    trunc = tmp_path / "trunc.gmt"
    trunc.write_bytes(out.read_bytes()[:-5])
    assert main(["verify", "--points", str(pts), *GRID, "--seed", "3", "--targets", str(trunc)]) != 0
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    assert main(["verify", "--points", str(empty), "--preset", "waymo"]) == 0
    assert _last_json(capsys)["records"] == 0


def test_inspect(tmp_path, scene, capsys):
    _, pts = scene
    out = tmp_path / "t.gmt"
    main(["gen-targets", "--points", str(pts), "--preset", "waymo", "--out", str(out)])
    capsys.readouterr()
    assert main(["inspect", "--targets", str(out)]) == 0
    info = _last_json(capsys)
    assert info["voxel_size"] == [0.32, 0.32, 6.0]
    assert main(["inspect", "--points", str(pts)]) == 0
    assert _last_json(capsys)["kind"] == "points"


TINY_MODEL = {"d_model": 16, "n_heads": 2, "d_hidden": 32, "vfe_channels": [8, 16], "head_hidden": 16}


def test_pretrain_zero_steps_and_nan(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": TINY_MODEL, "n_scenes": 2, "steps": 0}))
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 0
    assert (out / "loss.csv").read_text().strip() == "step,l_cent,l_occ,l_nor,l_curv,total"
    assert (out / "params.gmp").read_bytes()[:4] == b"GMP1"
    cfg.write_text(json.dumps({"model": TINY_MODEL, "n_scenes": 1, "steps": 3, "inject_nan_step": 1}))
    capsys.readouterr()
    assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 4
    assert _last_json(capsys) == {"command": "pretrain", "error": "non-finite loss", "step": 1}
    cfg.write_text("[]")
    assert main(["pretrain", "--config", str(cfg), "--out", str(out)]) == 2


def test_pretrain_from_scene_dir(tmp_path, scene):
    _, pts = scene
    scenes = tmp_path / "scenes"
    scenes.mkdir()
    (scenes / "a.csv").write_bytes(pts.read_bytes())
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"model": TINY_MODEL, "steps": 2, "grid": {
        "range_min": [0, 0, -1], "range_max": [8, 8, 3], "voxel_size": [0.5, 0.5, 4]}}))
    out = tmp_path / "run"
    assert main(["pretrain", "--config", str(cfg), "--scenes", str(scenes), "--out", str(out)]) == 0
    assert len((out / "loss.csv").read_text().splitlines()) == 3
