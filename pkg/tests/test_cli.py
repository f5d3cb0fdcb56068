"""End-to-end tests of the command-line surface (run in-process via main)."""

import json
import os

import pytest

from hyve.cli import main, parse_cameras
from hyve.errors import UsageError

GEN = ["gen-data", "--size", "16", "--base-channels", "32",
       "--train-scenes", "1", "--test-scenes", "1", "--seed", "7"]
TRAIN = ["train", "--epochs", "2", "--g", "3", "--widths", "6,8", "--seed", "1"]


def _gen(tmp_path, name="data"):
    out = tmp_path / name
    assert main(GEN + ["--out", str(out)]) == 0
    return out


def _tree_bytes(root):
    out = {}
    for base, _, files in os.walk(root):
        for f in files:
            p = os.path.join(base, f)
            out[os.path.relpath(p, root)] = open(p, "rb").read()
    return out


def test_parse_cameras():
    cams = parse_cameras("specim,corning,base,subset:2:1:odd,linspace:500:900:10",
                         (400.0, 1000.0), 32)
    names = [c.name for c in cams]
    assert names == ["specim", "corning", "camA", "odd", "linspace4"]
    assert cams[0].channels == 224 and cams[1].channels == 249
    assert cams[3].channels == 16
    with pytest.raises(UsageError):
        parse_cameras("what", (400.0, 1000.0), 32)


def test_gen_data_manifest_and_files(tmp_path):
    data = _gen(tmp_path)
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["classes"] == 3
    assert set(manifest["cameras"]) == {"camA", "subset2_0"}
    assert len(manifest["train"]) == 2 and len(manifest["test"]) == 2
    for entry in manifest["train"] + manifest["test"]:
        assert (data / entry["path"]).exists()


def test_gen_data_is_byte_deterministic(tmp_path):
    a = _gen(tmp_path, "a")
    b = _gen(tmp_path, "b")
    assert _tree_bytes(a) == _tree_bytes(b)


def test_train_eval_export_pipeline(tmp_path, capsys):
    data = _gen(tmp_path)
    run = tmp_path / "run"
    assert main(TRAIN + ["--data", str(data / "manifest.json"), "--out", str(run)]) == 0
    assert (run / "checkpoint.hyve").exists()
    history = (run / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,split,metric,value"
    assert len([l for l in history if l.startswith("0,train,loss")]) == 1
    wroi = (run / "wroi.csv").read_text().splitlines()
    assert wroi[0] == "epoch,wroi,mean_nm,variance_nm2"
    assert len(wroi) == 1 + 2 * 3  # 2 epochs x 3 WROIs

    out_csv = tmp_path / "eval.csv"
    assert main(["eval", "--model", str(run / "checkpoint.hyve"),
                 "--data", str(data / "manifest.json"), "--out", str(out_csv)]) == 0
    rows = out_csv.read_text().splitlines()
    assert rows[0] == "experiment,setting,seed,camera,oa,aa,kappa"
    assert len(rows) == 3  # header + two cameras

    filters = tmp_path / "filters"
    assert main(["export-filters", "--model", str(run / "checkpoint.hyve"),
                 "--out", str(filters)]) == 0
    assert (filters / "filters.csv").read_text().splitlines()[0] == \
        "wroi,mean_nm,variance_nm2,peak_density"
    assert (filters / "overlap.csv").exists()
    assert (filters / "means.svg").read_text().startswith("<svg")
    assert (filters / "variances.svg").exists()
    capsys.readouterr()


def test_train_is_byte_deterministic(tmp_path):
    data = _gen(tmp_path)
    args = TRAIN + ["--data", str(data / "manifest.json")]
    assert main(args + ["--out", str(tmp_path / "r1")]) == 0
    assert main(args + ["--out", str(tmp_path / "r2")]) == 0
    assert _tree_bytes(tmp_path / "r1") == _tree_bytes(tmp_path / "r2")


def test_usage_errors_exit_nonzero(tmp_path, capsys):
    data = _gen(tmp_path)
    manifest = str(data / "manifest.json")
    # wavelength-aware arch with preprocessing
    assert main(["train", "--data", manifest, "--out", str(tmp_path / "x"),
                 "--arch", "hyve", "--preproc", "interp"]) == 2
    assert "preproc none" in capsys.readouterr().err
    # fixed arch on mixed grids without preprocessing
    assert main(["train", "--data", manifest, "--out", str(tmp_path / "x"),
                 "--arch", "conv2d", "--preproc", "none"]) == 2
    assert "mixed cameras" in capsys.readouterr().err
    # unknown camera at eval time needs a checkpoint first
    run = tmp_path / "run"
    assert main(TRAIN + ["--data", manifest, "--out", str(run)]) == 0
    assert main(["eval", "--model", str(run / "checkpoint.hyve"),
                 "--data", manifest, "--camera", "nope"]) == 2
    assert "not in manifest" in capsys.readouterr().err


def test_export_filters_rejects_fixed_model(tmp_path, capsys):
    data = _gen(tmp_path)
    run = tmp_path / "conv"
    assert main(["train", "--data", str(data / "manifest.json"), "--out", str(run),
                 "--arch", "conv2d", "--preproc", "interp", "--epochs", "1",
                 "--widths", "6,8", "--seed", "1"]) == 0
    assert main(["export-filters", "--model", str(run / "checkpoint.hyve"),
                 "--out", str(tmp_path / "f")]) == 2
    assert "wavelength-aware" in capsys.readouterr().err


def test_sweep_writes_summary(tmp_path, capsys):
    out = tmp_path / "sweep.csv"
    assert main(["sweep", "--experiment", "g", "--g-values", "1,2", "--seeds", "1",
                 "--classes", "2", "--size", "16", "--train-scenes", "1",
                 "--test-scenes", "1", "--epochs", "2", "--out", str(out)]) == 0
    rows = out.read_text().splitlines()
    assert rows[0] == "experiment,setting,seed,camera,oa,aa,kappa"
    assert len(rows) == 3  # two settings x one seed x camera A
    capsys.readouterr()
