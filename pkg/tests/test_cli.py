import json
import subprocess
import sys

import pytest

from velocity_splat.cli import main
from velocity_splat.synthetic import recipe_to_dict, two_group_recipe
from velocity_splat.train import TrainConfig


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


@pytest.fixture(scope="module")
def small(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    rec = two_group_recipe(seed=3, width=24, height=24, n_frames=4, n_static=6, n_dynamic=3, n_views=3)
    (root / "recipe.json").write_text(json.dumps(recipe_to_dict(rec)))
    cfg = TrainConfig(iterations=3, tau=2, warmup_static_iters=0, densify=False, fad=False, field_width=8,
                      spatial_bands=2, time_bands=1)
    (root / "train.json").write_text(json.dumps(cfg.to_dict()))
    assert main(["synth", "--config", str(root / "recipe.json"), "--out", str(root / "data")]) == 0
    return root


def test_synth_repeatable(small, tmp_path):
    assert main(["synth", "--config", str(small / "recipe.json"), "--out", str(tmp_path / "b"), "--workers", "2"]) == 0
    assert tree_bytes(small / "data") == tree_bytes(tmp_path / "b")


def test_seed_override(small, tmp_path):
    main(["synth", "--config", str(small / "recipe.json"), "--out", str(tmp_path / "s"), "--seed", "4"])
    assert tree_bytes(small / "data") != tree_bytes(tmp_path / "s")
    assert json.loads((tmp_path / "s" / "recipe.json").read_text())["seed"] == 4


def test_pipeline(small, tmp_path, capsys):
    data, ck = str(small / "data"), str(tmp_path / "ck")
    assert main(["train", "--dataset", data, "--config", str(small / "train.json"), "--out", ck]) == 0
    assert {"scene.json", "field.bin", "optimizer.bin", "train_log.csv", "config.json"} <= {p.name for p in (tmp_path / "ck").iterdir()}
    assert main(["render", "--checkpoint", ck, "--dataset", data, "--camera", "1", "--frames", "0,2-3",
                 "--out", str(tmp_path / "r")]) == 0
    names = sorted(p.name for p in (tmp_path / "r").iterdir())
    assert "frame_0003.ppm" in names and "velocity_0002.flo" in names and "velocity_0003.flo" not in names
    assert main(["refine", "--checkpoint", ck, "--dataset", data, "--out", str(tmp_path / "traj.jsonl")]) == 0
    assert (tmp_path / "traj.jsonl").stat().st_size > 0
    capsys.readouterr()
    assert main(["eval", "--dataset", data, "--checkpoint", ck, "--cameras", "0", "--out", str(tmp_path / "e.json")]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report == json.loads((tmp_path / "e.json").read_text())
    assert set(report) >= {"psnr", "dpsnr", "ssim", "velocity_epe"}
    main(["flowviz", "--input", str(tmp_path / "r" / "velocity_0000.flo"), "--out", str(tmp_path / "v.ppm")])
    assert (tmp_path / "v.ppm").read_bytes().startswith(b"P6")


def test_eval_self(small, capsys):
    data = str(small / "data")
    assert main(["eval", "--dataset", data, "--prediction", data, "--cameras", "0,1"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["psnr"] == 99.0 and report["velocity_epe"] == 0.0 and report["ssim"] == pytest.approx(1.0)


def test_usage_errors(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 1
    with pytest.raises(SystemExit) as exc:
        main(["synth"])
    assert exc.value.code == 1


@pytest.mark.parametrize("argv", [
    ["eval", "--dataset", "{tmp}/missing", "--prediction", "{tmp}/missing"],
    ["train", "--dataset", "{tmp}/missing", "--out", "{tmp}/o"],
    ["flowviz", "--input", "{tmp}/none.flo", "--out", "{tmp}/x.ppm"],
])
def test_data_errors(tmp_path, argv, capsys):
    assert main([a.format(tmp=tmp_path) for a in argv]) == 2
    assert "data error" in capsys.readouterr().err


def test_bad_camera(small):
    assert main(["eval", "--dataset", str(small / "data"), "--prediction", str(small / "data"), "--cameras", "9"]) == 2


def test_module_entry():
    out = subprocess.run([sys.executable, "-m", "velocity_splat", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "synth" in out.stdout
