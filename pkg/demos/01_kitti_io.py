"""
Reading and writing KITTI-style data
====================================

Generate a small synthetic tree in the KITTI layout, read one frame back
with the low-level parsers, then ingest the whole tree into per-object
samples.
"""

import tempfile
from pathlib import Path

import numpy as np

from lidar_voice import kitti_io as kio
from lidar_voice.synthetic import SyntheticSpec, write_kitti_layout

root = Path(tempfile.mkdtemp())
stems = write_kitti_layout(SyntheticSpec((2, 2, 1, 1), seed=0), root)
print("frames:", stems)

# A velodyne scan is a flat float32 array of (x, y, z, reflectance) records.
blob = (root / "velodyne" / f"{stems[0]}.bin").read_bytes()
scan = kio.read_velodyne_bin(blob)
print("points:", len(scan), "bytes:", len(blob))
assert kio.write_velodyne_bin(scan) == blob

# Labels and calibration are plain text.
(label,) = kio.parse_label_file((root / "label_2" / f"{stems[0]}.txt").read_text())
print("label:", label.class_name, "dims (h, w, l):", label.dims, "yaw:", label.rotation_y)
calib = kio.parse_calib_file((root / "calib" / f"{stems[0]}.txt").read_text())
print("P2 row 0:", np.round(calib.p2[0], 2))

# Ingest every frame: box crop of the scan, 2D crop of the image.
samples, histogram = kio.build_dataset(root / "velodyne", root / "image_2", root / "label_2", root / "calib")
print("histogram:", histogram)
for s in samples:
    print(f"  class={kio.CLASS_NAMES[s.class_id]:<10} points={len(s.points):5d} "
          f"image={s.image.width}x{s.image.height} distance={s.distance_m:.2f} m")
