import json
import re
import subprocess
import sys

import pytest

from lidar_voice.cli import EXIT_CONFIG, EXIT_EMPTY, EXIT_IO, EXIT_OK, EXIT_PARSE, main
from lidar_voice.model import load_checkpoint

SMALL_INI = """
[fit]
max_epochs = 2
[model]
width = 0.03125
image_size = 16
n_points = 64
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "small.ini").write_text(SMALL_INI)
    assert main(["synth-data", "--out", str(root / "data"), "--counts", "3", "3", "2", "2", "--seed", "4"]) == 0
    return root


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def trained(workspace):
    out = workspace / "run"
    code = main(["--config", str(workspace / "small.ini"), "--seed", "1", "train",
                 "--data", str(workspace / "data"), "--out", str(out)])
    assert code == EXIT_OK
    return out


def test_help_lists_verbs():
    res = subprocess.run([sys.executable, "-m", "lidar_voice.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0
    for verb in ("synth-data", "preprocess", "train", "eval", "predict", "visualize", "bench"):
        assert verb in res.stdout


def test_synth_data_reference_ratio(tmp_path, capsys):
    code, out, _ = run(capsys, "synth-data", "--out", tmp_path, "--paper-ratio", 60)
    assert code == 0
    assert "'Car': 44" in out and "'Cyclist': 2" in out
    assert len(list((tmp_path / "velodyne").glob("*.bin"))) == 60


def test_preprocess_writes_npz(workspace, tmp_path, capsys):
    import numpy as np

    out = tmp_path / "arrays.npz"
    code, text, _ = run(capsys, "preprocess", "--data", workspace / "data", "--out", out,
                        "--target-points", 128, "--dbscan", "--seed", 3)
    assert code == 0
    arrays = np.load(out)
    assert arrays["points"].shape == (10, 128, 3)
    assert arrays["labels"].tolist().count(0) == 3
    assert len(re.findall(r"^sample=\d+ points=\d+ clusters=\d+ noise=\d+$", text, re.M)) == 10


def test_train_outputs(trained):
    lines = (trained / "epochs.log").read_text().splitlines()
    assert len(lines) == 2 and lines[0].startswith("epoch=1 ") and "wall_ms" not in lines[0]
    metrics = json.loads((trained / "metrics.json").read_text())
    assert set(metrics) >= {"train", "val", "epochs_run", "mode"}
    _, config, extra = load_checkpoint(trained / "best.ckpt")
    assert config.width == 0.03125 and config.seed == 1
    assert extra["histogram"] == {"Car": 3, "Pedestrian": 3, "Cyclist": 2, "DontCare": 2}


def test_train_is_deterministic(workspace, trained, tmp_path):
    code = main(["--config", str(workspace / "small.ini"), "--seed", "1", "train",
                 "--data", str(workspace / "data"), "--out", str(tmp_path)])
    assert code == 0
    assert (tmp_path / "epochs.log").read_text() == (trained / "epochs.log").read_text()


def test_train_lidar_only_mode_recorded(workspace, tmp_path):
    code = main(["--config", str(workspace / "small.ini"), "train", "--data", str(workspace / "data"),
                 "--out", str(tmp_path), "--mode", "lidar_only", "--epochs", "1"])
    assert code == 0
    assert load_checkpoint(tmp_path / "best.ckpt")[1].mode == "lidar_only"


def test_eval_json_and_text_agree(workspace, trained, capsys):
    base = ("eval", "--data", workspace / "data", "--checkpoint", trained / "best.ckpt", "--split", "train")
    code, js, _ = run(capsys, *base, "--format", "json")
    assert code == 0
    report = json.loads(js)
    code, text, _ = run(capsys, *base)
    assert code == 0
    assert f"accuracy={report['accuracy']:.6f}" in text and f"loss={report['loss']:.6f}" in text
    for i, row in enumerate(report["confusion"]):
        assert " ".join(f"{v:5d}" for v in row) in text
    metrics = json.loads((trained / "metrics.json").read_text())
    assert report["accuracy"] == metrics["train"]["accuracy"]


def test_predict_with_file_backend(workspace, trained, tmp_path, capsys):
    d = workspace / "data"
    transcript = tmp_path / "said.txt"
    code, out, _ = run(capsys, "predict", "--checkpoint", trained / "best.ckpt",
                       "--bin", d / "velodyne" / "000000.bin", "--image", d / "image_2" / "000000.ppm",
                       "--label", d / "label_2" / "000000.txt", "--calib", d / "calib" / "000000.txt",
                       "--backend", "file", "--transcript", transcript)
    assert code == 0
    m = re.search(r"phrase='(.*)' status=(\S+)", out)
    assert m
    if m.group(2) == "spoken":
        assert transcript.read_text(encoding="utf-8") == m.group(1) + "\n"
    else:
        assert m.group(1) == "" and m.group(2) == "skipped"
    latency = re.search(r"^latency (.*)$", out, re.M).group(1)
    for stage in ("preprocess_ms=", "inference_ms=", "phrase_ms=", "tts_ms=", "total_ms="):
        assert stage in latency


def test_visualize_outputs(workspace, tmp_path, capsys):
    d = workspace / "data"
    prefix = tmp_path / "viz" / "frame0"
    code, _, _ = run(capsys, "visualize", "--bin", d / "velodyne" / "000000.bin",
                     "--image", d / "image_2" / "000000.ppm", "--out", prefix)
    assert code == 0
    ply = (tmp_path / "viz" / "frame0.ply").read_text()
    svg = (tmp_path / "viz" / "frame0.svg").read_text()
    n = int(re.search(r"element vertex (\d+)", ply).group(1))
    assert svg.count("<circle") == n
    assert (tmp_path / "viz" / "frame0_image.ppm").read_bytes() == (d / "image_2" / "000000.ppm").read_bytes()


def test_bench_single_iteration(workspace, trained, capsys):
    code, out, _ = run(capsys, "bench", "--data", workspace / "data", "--checkpoint", trained / "best.ckpt",
                       "--iterations", 1)
    assert code == 0
    summary = json.loads(out[out.index("{"):])
    assert summary["iterations"] == 1 and summary["budget_ms"] == 500.0
    for stats in summary["stages"].values():
        assert stats["mean"] == stats["median"] == stats["p95"]


# ---------------------------------------------------------------------------
# exit codes


def test_exit_config_error(workspace, tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[fit]\nlearning_rate = 1\n")
    code, _, err = run(capsys, "--config", bad, "train", "--data", workspace / "data", "--out", tmp_path / "o")
    assert code == EXIT_CONFIG and "unknown key" in err
    code, _, _ = run(capsys, "train", "--out", tmp_path / "o")
    assert code == EXIT_CONFIG
    code, _, _ = run(capsys, "bench", "--data", workspace / "data", "--checkpoint", "x", "--iterations", 0)
    assert code == EXIT_CONFIG


def test_exit_parse_error(workspace, trained, tmp_path, capsys):
    blob = bytearray((trained / "best.ckpt").read_bytes())
    blob[-1] ^= 0xFF
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob))
    code, _, err = run(capsys, "eval", "--data", workspace / "data", "--checkpoint", tmp_path / "bad.ckpt")
    assert code == EXIT_PARSE and "checksum" in err


def test_exit_io_error(workspace, tmp_path, capsys):
    main(["synth-data", "--out", str(tmp_path), "--counts", "1", "1", "0", "0"])
    (tmp_path / "label_2" / "000001.txt").unlink()
    code, _, err = run(capsys, "preprocess", "--data", tmp_path, "--out", tmp_path / "a.npz")
    assert code == EXIT_IO and "frame 000001: missing label file" in err


def test_exit_empty_dataset(tmp_path, capsys):
    main(["synth-data", "--out", str(tmp_path), "--counts", "0", "0", "0", "0"])
    code, _, err = run(capsys, "train", "--data", tmp_path, "--out", tmp_path / "o")
    assert code == EXIT_EMPTY and "no samples" in err
