"""
Training on synthetic objects
=============================

Train a narrowed fused model on a small balanced synthetic set, save the
best checkpoint, and reload it for prediction.
"""

import tempfile
from pathlib import Path

from lidar_voice.model import ModelConfig, load_checkpoint, predict
from lidar_voice.pipeline import train_val_arrays
from lidar_voice.synthetic import SyntheticSpec, generate_samples
from lidar_voice.training import FitConfig, evaluate, fit

samples = generate_samples(SyntheticSpec((12, 12, 12, 12), seed=0))
config = ModelConfig(width=0.125, image_size=32, n_points=512)
train, val = train_val_arrays(samples, config, val_fraction=0.25, seed=0)
print("train/val:", len(train), len(val))

ckpt = Path(tempfile.mkdtemp()) / "best.ckpt"
params, reports = fit(train, val, FitConfig(max_epochs=40), config, checkpoint_path=ckpt,
                      on_epoch=lambda r: print(r.line(with_time=False)))

loss, metrics = evaluate(params, config, val)
print(f"val loss {loss:.4f}, val accuracy {metrics.accuracy:.3f}")
print(metrics.confusion)

loaded, loaded_config, _ = load_checkpoint(ckpt)
result = predict(loaded, loaded_config, val.points[0], val.images[0], distance_m=7.3)
print("first val sample:", result.class_name, f"{result.confidence:.2f}", "true:", int(val.labels[0]))
