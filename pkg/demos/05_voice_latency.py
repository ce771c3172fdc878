"""
Spoken phrases and latency accounting
=====================================

Turn detections into phrases, speak them through a text backend, and time
the stages of one detection against the 500 ms budget.
"""

import sys

from lidar_voice.model import DetectionResult, ModelConfig, init_params
from lidar_voice.pipeline import detect
from lidar_voice.synthetic import generate_synthetic_sample
from lidar_voice.voice import EchoBackend, announce, format_phrase, latency_report

for result in (DetectionResult(1, 0.90, 3.0), DetectionResult(0, 0.952, 12.46), DetectionResult(3, 0.99, 4.0)):
    phrase = format_phrase(result)
    status = announce(phrase, EchoBackend(sys.stdout))
    print(f"  -> {status.value} (suppressed={phrase.suppressed})")

# Budget accounting is exact and strict: 500 ms is within budget.
print(latency_report({"preprocess": 50, "inference": 100, "phrase": 50, "tts": 300}).line())
print(latency_report({"preprocess": 50, "inference": 100, "phrase": 51, "tts": 300}).line())

# One timed detection on an untrained narrow model.
config = ModelConfig(width=1 / 16, image_size=32, n_points=256)
det = detect(generate_synthetic_sample(0, seed=5), init_params(config), config, EchoBackend(sys.stdout))
print(det.latency.line())
