import io
import re
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from lidar_voice.config import ConfigError, RunConfig, parse_run_config
from lidar_voice.model import ModelConfig, init_params
from lidar_voice.pipeline import detect, latency_summary, to_arrays, train_val_arrays
from lidar_voice.synthetic import SyntheticSpec, generate_samples
from lidar_voice.viz import ply_text, svg_scatter
from lidar_voice.voice import AnnounceStatus, EchoBackend, NullBackend, latency_report

# ---------------------------------------------------------------------------
# config


def test_defaults_are_the_reference_hyperparameters():
    cfg = RunConfig()
    assert (cfg.fit.lr0, cfg.fit.beta1, cfg.fit.beta2) == (0.0005, 0.9, 0.999)
    assert cfg.fit.batch_size == 8 and cfg.fit.max_epochs == 50
    assert (cfg.fit.early_stop_patience, cfg.fit.plateau_patience, cfg.fit.plateau_factor) == (15, 5, 0.5)
    assert cfg.fit.class_weights == (1.0, 5.0, 20.0, 5.0)
    assert cfg.model.dropout_rate == 0.4
    assert (cfg.model.n_points, cfg.model.image_size) == (1024, 224)


def test_parse_sections():
    cfg = parse_run_config("""
[fit]
max_epochs = 7
class_weights = 1, 2, 3, 4
grad_clip = none
[model]
mode = lidar_only
width = 0.125
[data]
root = runs/x
no_calib = yes
limit = 12
""")
    assert cfg.fit.max_epochs == 7 and cfg.fit.class_weights == (1.0, 2.0, 3.0, 4.0)
    assert cfg.fit.grad_clip is None
    assert cfg.model.mode == "lidar_only" and cfg.model.width == 0.125
    assert cfg.data.root == "runs/x" and cfg.data.no_calib and cfg.data.limit == 12


@pytest.mark.parametrize("text,match", [
    ("[fit]\nlearning_rate = 0.1\n", "unknown key"),
    ("[optimizer]\nlr0 = 0.1\n", "unknown section"),
    ("[fit]\nmax_epochs = many\n", "max_epochs"),
    ("[model]\nmode = rgb_only\n", "mode"),
    ("[data]\nno_calib = maybe\n", "boolean"),
    ("not an ini file", "section"),
])
def test_config_errors(text, match):
    with pytest.raises(ConfigError, match=match):
        parse_run_config(text)


# ---------------------------------------------------------------------------
# visualisation


def test_ply_one_point_and_empty():
    text = ply_text(np.array([[1.0, 2.0, 3.0]]), class_id=1)
    lines = text.splitlines()
    assert "element vertex 1" in lines
    body = lines[lines.index("end_header") + 1:]
    assert body == ["1.000000 2.000000 3.000000 220 60 40"]
    empty = ply_text(np.zeros((0, 3)))
    assert "element vertex 0" in empty and empty.rstrip().endswith("end_header")


def test_svg_parses_and_counts_points():
    pts = np.random.default_rng(0).normal(size=(137, 3))
    svg = svg_scatter(pts, class_id=0)
    root = ET.fromstring(svg)
    ns = "{http://www.w3.org/2000/svg}"
    assert root.tag == f"{ns}svg" and root.get("version") == "1.1"
    circles = root.findall(f"{ns}circle")
    assert len(circles) == 137
    assert len(root.findall(f"{ns}rect")) == 1
    xs = np.array([float(c.get("cx")) for c in circles])
    assert xs.min() == pytest.approx(10.0) and xs.max() <= 390.0 + 1e-9
    assert svg == svg_scatter(pts, class_id=0)  # byte-deterministic
    assert len(ET.fromstring(svg_scatter(np.zeros((0, 3)))).findall(f"{ns}circle")) == 0


# ---------------------------------------------------------------------------
# pipeline

SMALL = ModelConfig(width=1 / 32, image_size=16, n_points=64)


def test_to_arrays_and_split():
    samples = generate_samples(SyntheticSpec((3, 3, 2, 2), seed=1))
    data = to_arrays(samples, SMALL, seed=0)
    assert data.points.shape == (10, 64, 3) and data.images.shape == (10, 16, 16, 3)
    tr, va = train_val_arrays(samples, SMALL, 0.2, seed=0)
    assert (len(tr), len(va)) == (8, 2)


def test_detect_reports_all_stages():
    sample = generate_samples(SyntheticSpec((1, 0, 0, 0), seed=2))[0]
    buf = io.StringIO()
    det = detect(sample, init_params(SMALL), SMALL, EchoBackend(buf))
    assert set(det.latency.stages_ms) == {"preprocess", "inference", "phrase", "tts"}
    assert det.latency.total_ms == pytest.approx(sum(det.latency.stages_ms.values()), abs=1e-9)
    if det.result.class_id == 3:
        assert det.status is AnnounceStatus.SKIPPED and buf.getvalue() == ""
    else:
        assert buf.getvalue() == det.phrase.text + "\n"
        assert re.search(r"\d+(\.\d)? meters away", det.phrase.text)
    assert det.result.distance_m == round(sample.distance_m, 1)


def test_latency_summary_single_iteration():
    r = latency_report({"preprocess": 5.0, "inference": 120.0, "phrase": 0.5, "tts": 400.0})
    s = latency_summary([r])
    for stats in s["stages"].values():
        assert stats["mean"] == stats["median"] == stats["p95"]
    assert s["over_budget"] == 1 and s["stages"]["total"]["mean"] == 525.5
    assert s["reference_ms"] == {"inference": 100.0, "tts": 300.0, "total": 400.0}


def test_detect_with_null_backend_is_spoken_or_skipped():
    sample = generate_samples(SyntheticSpec((0, 1, 0, 0), seed=3))[0]
    det = detect(sample, init_params(SMALL), SMALL, NullBackend())
    assert det.status in (AnnounceStatus.SPOKEN, AnnounceStatus.SKIPPED)
