"""End-to-end glue: dataset trees to arrays, and single-frame detection."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kitti_io import Sample, build_dataset
from .model import DetectionResult, ModelConfig, predict
from .preprocess import preprocess_batch, preprocess_sample
from .training import ArrayDataset, split_indices
from .voice import (AnnounceStatus, LatencyReport, SpeechBackend, StageTimer, VoicePhrase, announce,
                    estimate_distance, format_phrase)


def load_kitti_tree(root, no_calib: bool = False, limit: int | None = None):
    """Samples and histogram from a ``velodyne/ image_2/ label_2/ calib/`` tree."""
    root = Path(root)
    calib = None if no_calib else root / "calib"
    return build_dataset(root / "velodyne", root / "image_2", root / "label_2", calib, limit)


def to_arrays(samples: list[Sample], config: ModelConfig, seed: int = 0) -> ArrayDataset:
    pts, imgs, labels = preprocess_batch(samples, seed, config.n_points, config.image_size)
    return ArrayDataset(pts, imgs, labels)


def train_val_arrays(samples, config: ModelConfig, val_fraction: float = 0.2, seed: int = 0):
    data = to_arrays(samples, config, seed)
    tr, va = split_indices(len(data), val_fraction, seed)
    return data.subset(tr), data.subset(va)


@dataclass
class Detection:
    result: DetectionResult
    phrase: VoicePhrase
    status: AnnounceStatus
    latency: LatencyReport


def detect(sample: Sample, params, config: ModelConfig, backend: SpeechBackend, seed: int = 0) -> Detection:
    """Preprocess, classify, phrase and announce one object crop, timing each stage."""
    timer = StageTimer()
    with timer.stage("preprocess"):
        points, image = preprocess_sample(sample, seed, config.n_points, config.image_size)
    with timer.stage("inference"):
        result = predict(params, config, points.coords, image.data, estimate_distance(sample))
    with timer.stage("phrase"):
        phrase = format_phrase(result)
    with timer.stage("tts"):
        status = announce(phrase, backend)
    return Detection(result, phrase, status, timer.report())


def latency_summary(reports: list[LatencyReport], budget_ms: float = 500.0) -> dict:
    """Mean, median and 95th percentile per stage over repeated runs."""
    stages = list(reports[0].stages_ms) + ["total"]
    table = {}
    for s in stages:
        vals = np.array([r.total_ms if s == "total" else r.stages_ms[s] for r in reports])
        table[s] = {"mean": float(vals.mean()), "median": float(np.median(vals)),
                    "p95": float(np.percentile(vals, 95))}
    return {
        "iterations": len(reports),
        "stages": table,
        "over_budget": int(sum(r.total_ms > budget_ms for r in reports)),
        "budget_ms": budget_ms,
        "reference_ms": dict(reports[0].reference_ms),
    }
