"""
Point and image preprocessing
=============================

Outlier removal, DBSCAN clustering, downsampling to a fixed size and
unit-sphere normalisation, followed by the bilinear image resize.
"""

import numpy as np

from lidar_voice import preprocess as pp
from lidar_voice.kitti_io import PointCloud
from lidar_voice.synthetic import generate_synthetic_sample

sample = generate_synthetic_sample(class_id=2, seed=3)  # a cyclist
cloud = sample.points
print("raw points:", len(cloud))

# Add two far strays; the mean + 2 std rule removes them.
noisy = PointCloud(np.vstack([cloud.points, cloud.points.mean(axis=0) + [[40, 0, 0], [0, 40, 0]]]))
clean = pp.remove_statistical_outliers(noisy)
print("with strays:", len(noisy))
print("after outlier removal:", len(clean))

labels = pp.cluster_dbscan(clean, eps=0.5, min_samples=5)
print("dbscan clusters:", labels.max() + 1, "noise points:", int((labels == -1).sum()))

down = pp.downsample_points(clean, target=1024, seed=0)
coords = pp.normalize_points(down, expected=1024).coords
print("normalised centroid:", np.round(coords.mean(axis=0), 12))
print("normalised max radius:", np.linalg.norm(coords, axis=1).max())

image = pp.scale_unit_range(pp.resize_bilinear(sample.image, 224, 224))
print("image:", image.shape, "range:", image.min(), image.max())
