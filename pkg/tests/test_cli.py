import csv
import io
import json
import shutil
import subprocess

import pytest

from conftest import small_config
from dinolab.cli import EXIT_CONFIG, EXIT_DATA, EXIT_MISMATCH, main
from dinolab.config import dump_toml
from dinolab.scoring import read_amap, read_index


@pytest.fixture(scope="module")
def workspace(tmp_path_factory, tiny_dataset):
    ws = tmp_path_factory.mktemp("cli")
    cfg = small_config(ws, data={"root": str(tiny_dataset)}, train={"total_iters": 12})
    (ws / "run.toml").write_text(dump_toml(cfg))
    assert main(["train", "--config", str(ws / "run.toml")]) == 0
    return ws, cfg


def test_synth(tmp_path, capsys):
    assert main(["synth", "--out", str(tmp_path / "d"), "--size", "56", "--seed", "1"]) == 0
    for cat in ("stripes", "checker", "blobs"):
        assert any((tmp_path / "d" / cat / "train" / "good").iterdir())
        assert any((tmp_path / "d" / cat / "ground_truth").rglob("*.png"))
    assert main(["synth", "--out", str(tmp_path / "e"), "--size", "28"]) == EXIT_CONFIG


def test_train_outputs(workspace):
    ws, _ = workspace
    run = ws / "run"
    assert (run / "checkpoint.pt").is_file() and (run / "loss.png").stat().st_size > 0
    assert len((run / "train_log.jsonl").read_text().splitlines()) == 12


def test_predict_csv(workspace, tmp_path):
    ws, _ = workspace
    out = tmp_path / "pred.csv"
    assert main(["predict", "--config", str(ws / "run.toml"), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert rows and {"image_id", "score", "label", "object_score"} <= set(rows[0])
    assert all(float(r["score"]) >= 0 for r in rows)


def test_export_and_evaluate_from_maps(workspace, tmp_path, capsys):
    ws, _ = workspace
    maps = tmp_path / "maps"
    assert main(["export-maps", "--config", str(ws / "run.toml"), "--out", str(maps), "--png"]) == 0
    index = read_index(maps / "index.json")
    first = next(iter(index.values()))
    assert read_amap(maps / first["map"]).shape == (56, 56)
    assert len(list((maps / "png").iterdir())) == len(index)

    capsys.readouterr()
    report = tmp_path / "report"
    assert main(["evaluate", "--config", str(ws / "run.toml"), "--maps", str(maps / "index.json"),
                 "--out", str(report), "--unified"]) == 0
    printed = list(csv.reader(io.StringIO(capsys.readouterr().out)))
    assert printed[0][0] in ("category", "scope")
    doc = json.loads((report / "report.json").read_text())
    assert "unified" in json.dumps(doc)
    for name in ("report.csv", "roc.png", "scores.png"):
        assert (report / name).stat().st_size > 0


def test_evaluate_matches_maps_path(workspace, tmp_path):
    ws, _ = workspace
    cfg_path = str(ws / "run.toml")
    main(["export-maps", "--config", cfg_path, "--out", str(tmp_path / "maps")])
    main(["evaluate", "--config", cfg_path, "--out", str(tmp_path / "a")])
    main(["evaluate", "--config", cfg_path, "--maps", str(tmp_path / "maps" / "index.json"), "--out", str(tmp_path / "b")])
    a = json.loads((tmp_path / "a" / "report.json").read_text())
    b = json.loads((tmp_path / "b" / "report.json").read_text())
    assert a.keys() == b.keys()
    assert a["mean"] == pytest.approx(b["mean"], abs=1e-6)


def test_override_changes_run(workspace, tmp_path):
    ws, _ = workspace
    out = tmp_path / "r2"
    assert main(["train", "--config", str(ws / "run.toml"), "train.total_iters=8", f"train.out_dir='{out}'"]) == 0
    assert len((out / "train_log.jsonl").read_text().splitlines()) == 8


def test_config_error_exit_code(workspace, capsys):
    ws, _ = workspace
    assert main(["predict", "--config", str(ws / "run.toml"), "objective.scheme=group3"]) == EXIT_CONFIG
    assert main(["train", "--config", str(ws / "run.toml"), "train.bogus=1"]) == EXIT_CONFIG
    assert "configuration error" in capsys.readouterr().err


def test_checkpoint_mismatch_exit_code(workspace, capsys):
    ws, _ = workspace
    assert main(["predict", "--config", str(ws / "run.toml"), "decoder.mixer='conv3'"]) == EXIT_MISMATCH
    assert "checkpoint mismatch" in capsys.readouterr().err


def test_data_error_exit_code(workspace, tmp_path):
    ws, _ = workspace
    assert main(["train", "--config", str(ws / "run.toml"), f"data.root='{tmp_path / 'missing'}'"]) == EXIT_DATA


@pytest.mark.skipif(shutil.which("dinolab") is None, reason="console script not installed")
def test_console_script_help():
    out = subprocess.run(["dinolab", "--help"], capture_output=True, text=True, check=True).stdout
    for cmd in ("train", "predict", "evaluate", "export-maps"):
        assert cmd in out
