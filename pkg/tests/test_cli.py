import json
import logging

import numpy as np
import pytest

from canopyseg import cli
from canopyseg import model as M
from canopyseg import raster as R
from canopyseg.errors import ConfigError

from pipeline import SMALL, run_pipeline

@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("run"))


def test_pipeline_artifacts(pipeline):
    for name in ("split.json", "model.ckpt", "model.loss.csv", "model.eval.json", "model.eval.txt",
                 "model.calibration.json", "calibrated.json", "calibrated.txt", "ov.png",
                 "data/index.json", "data/rejected.txt", "scenes/scene_000.json"):
        assert (pipeline / name).exists(), name
    assert (pipeline / "model.loss.csv").read_text().count("\n") == 3
    assert json.loads((pipeline / "model.eval.json").read_text())["threshold_source"] == "default"
    report = json.loads((pipeline / "calibrated.json").read_text())
    assert report["threshold_source"] == "checkpoint"
    assert report["threshold"] == M.load(pipeline / "model.ckpt").threshold


def test_prepare_logs_rejections(pipeline):
    lines = (pipeline / "data/rejected.txt").read_text().splitlines()
    assert lines and all(line.split(",")[2] in ("brightness", "blank") for line in lines)


def test_predict_overlay_dimensions(pipeline):
    ov = R.load_rgb(pipeline / "ov.png")
    assert (ov.width, ov.height) == (192, 192)


def test_predict_non_multiple_leaves_border(pipeline, tmp_path, caplog):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (100, 130, 3)).astype(np.uint8)
    R.save_png_array(img, tmp_path / "odd.png")
    with caplog.at_level(logging.WARNING, "canopyseg"):
        code = cli.main(["predict", "--model", str(pipeline / "model.ckpt"), "--image", str(tmp_path / "odd.png"),
                         "--out", str(tmp_path / "ov.png"), "--threshold", "0.01"])
    assert code == 0
    ov = R.load_rgb(tmp_path / "ov.png").rgb
    assert ov.shape == img.shape
    np.testing.assert_array_equal(ov[64:], img[64:])
    np.testing.assert_array_equal(ov[:, 128:], img[:, 128:])
    assert (ov[:64, :128] != img[:64, :128]).any()
    assert "border" in caplog.text


def test_eval_default_threshold_logged(pipeline, tmp_path, caplog):
    bare = M.load(pipeline / "model.ckpt")
    bare.threshold = None
    M.save(bare, tmp_path / "bare.ckpt")
    with caplog.at_level(logging.WARNING, "canopyseg"):
        assert cli.main(["eval", "--model", str(tmp_path / "bare.ckpt"), "--data", str(pipeline / "data"),
                         "--manifest", str(pipeline / "split.json")]) == 0
    assert "0.85" in caplog.text
    assert json.loads((tmp_path / "bare.eval.json").read_text())["threshold"] == 0.85


def test_rerun_is_byte_identical(pipeline, tmp_path):
    again = run_pipeline(tmp_path / "again")
    for name in ("split.json", "model.loss.csv", "model.eval.json", "calibrated.json", "model.calibration.json",
                 "model.ckpt", "data/index.json"):
        assert (pipeline / name).read_bytes() == (again / name).read_bytes(), name


def test_usage_errors(capsys):
    assert cli.main(["train", "--bogus"]) == 1
    assert "usage" in capsys.readouterr().err
    assert cli.main([]) == 1
    assert cli.main(["frobnicate"]) == 1
    assert cli.main(["split", "--data", "x", "--out", "y", "--seed", "notanint"]) == 1


def test_data_errors(tmp_path, capsys):
    assert cli.main(["split", "--data", str(tmp_path / "nowhere"), "--out", str(tmp_path / "m.json")]) == 2
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert cli.main(["eval", "--model", str(tmp_path / "junk.ckpt"), "--data", str(tmp_path),
                     "--manifest", str(tmp_path / "m.json")]) == 2
    assert "FormatError" in capsys.readouterr().err
    (tmp_path / "bad.json").write_text('{"train": {"learning_rat": 1}}')
    assert cli.main(["synth", "--config", str(tmp_path / "bad.json"), "--out", str(tmp_path / "s")]) == 2


def test_run_config_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        cli.RunConfig.from_dict({"colour": 1})
    with pytest.raises(ConfigError):
        cli.RunConfig.from_dict({"unet": {"depth": 9}})
    cfg = cli.RunConfig.from_dict(SMALL)
    assert cfg.unet.depth == 2 and cfg.scene.width == 192
    assert cli.RunConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


def test_default_model_pipeline_completes(tmp_path):
    # full-size U-Net and default training settings, one epoch on a tiny scene
    config = {"scene": {"width": 256, "height": 256, "ground_patch_probability": 0.0, "seed": 4},
              "scene_count": 1, "train": {"epochs": 1}}
    root = run_pipeline(tmp_path, config)
    net = M.load(root / "model.ckpt")
    assert net.config == M.UNetConfig() and M.param_count(net) == 8_630_497
    assert net.input_mean != M.FIXED_MEAN
