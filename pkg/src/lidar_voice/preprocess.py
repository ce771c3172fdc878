"""Point-cloud and image conditioning into fixed-shape network inputs."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .kitti_io import PointCloud, RgbImage, Sample

N_POINTS = 1024
IMAGE_SIZE = 224


class EmptyInputError(ValueError):
    pass


class PreprocessShapeError(ValueError):
    pass


@dataclass
class ProcessedPoints:
    coords: np.ndarray  # (n, 3)
    source_count: int


@dataclass
class ProcessedImage:
    data: np.ndarray  # (h, w, 3) in [0, 1]


def remove_statistical_outliers(cloud: PointCloud, n_std: float = 2.0) -> PointCloud:
    """Drop points farther from the centroid than mean + n_std * std of those distances.

    The standard deviation is the population one. Point order is kept.
    """
    if len(cloud) == 0:
        raise EmptyInputError("outlier removal needs at least one point")
    d = np.linalg.norm(cloud.points - cloud.points.mean(axis=0), axis=1)
    keep = d <= d.mean() + n_std * d.std()
    inten = cloud.intensities[keep] if cloud.intensities is not None else None
    return PointCloud(cloud.points[keep], inten)


def cluster_dbscan(cloud: PointCloud, eps: float = 0.5, min_samples: int = 5) -> np.ndarray:
    """Density clustering; returns one id per point, -1 for noise.

    Neighbourhoods are closed balls of radius ``eps`` and include the point
    itself. Cluster ids follow first-touch scan order.
    """
    if eps <= 0 or min_samples < 1:
        raise ValueError("eps must be > 0 and min_samples >= 1")
    pts = cloud.points
    n = len(pts)
    labels = np.full(n, -1, dtype=np.int64)
    if n == 0:
        return labels
    neighbours = cKDTree(pts).query_ball_point(pts, r=eps)
    core = np.array([len(nb) >= min_samples for nb in neighbours])

    next_id = 0
    for i in range(n):
        if labels[i] != -1 or not core[i]:
            continue
        labels[i] = next_id
        queue = deque([i])
        while queue:
            p = queue.popleft()
            if not core[p]:
                continue
            for q in neighbours[p]:
                if labels[q] == -1:
                    labels[q] = next_id
                    queue.append(q)
        next_id += 1
    return labels


def downsample_points(cloud: PointCloud, target: int = N_POINTS, seed: int = 0) -> PointCloud:
    """Resample to exactly ``target`` points.

    Larger clouds are sampled without replacement; smaller ones keep every
    point and top up with indices drawn with replacement.
    """
    n = len(cloud)
    if n == 0:
        raise EmptyInputError("cannot resample an empty cloud")
    if target < 1:
        raise ValueError("target must be >= 1")
    if n == target:
        return PointCloud(cloud.points.copy(), None if cloud.intensities is None else cloud.intensities.copy())
    rng = np.random.default_rng(seed)
    if n > target:
        idx = rng.choice(n, size=target, replace=False)
    else:
        idx = np.concatenate([np.arange(n), rng.integers(0, n, size=target - n)])
    inten = cloud.intensities[idx] if cloud.intensities is not None else None
    return PointCloud(cloud.points[idx], inten)


def normalize_points(cloud: PointCloud, expected: int = N_POINTS) -> ProcessedPoints:
    """Centre on the centroid and scale into the unit ball."""
    if len(cloud) != expected:
        raise PreprocessShapeError(f"expected {expected} points, got {len(cloud)}")
    centred = cloud.points - cloud.points.mean(axis=0)
    radius = np.sqrt((centred**2).sum(axis=1)).max()
    if radius < 1e-12 or np.ptp(cloud.points, axis=0).max() == 0.0:
        # Degenerate spread; rounding in the mean can leave residue, so emit exact zeros.
        coords = np.zeros_like(centred)
    else:
        coords = centred / radius
    return ProcessedPoints(coords, len(cloud))


def _axis_weights(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, src - lo


def resize_bilinear(image: RgbImage | np.ndarray, out_w: int = IMAGE_SIZE, out_h: int = IMAGE_SIZE) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment; returns float64 (out_h, out_w, 3)."""
    arr = image.pixels if isinstance(image, RgbImage) else np.asarray(image)
    arr = arr.astype(np.float64)
    if arr.ndim != 3 or arr.shape[0] == 0 or arr.shape[1] == 0 or out_w <= 0 or out_h <= 0:
        raise PreprocessShapeError(f"cannot resize {arr.shape} to {out_h}x{out_w}")
    y0, y1, fy = _axis_weights(arr.shape[0], out_h)
    x0, x1, fx = _axis_weights(arr.shape[1], out_w)
    rows = arr[y0] * (1 - fy)[:, None, None] + arr[y1] * fy[:, None, None]
    return rows[:, x0] * (1 - fx)[None, :, None] + rows[:, x1] * fx[None, :, None]


def scale_unit_range(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi == lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def preprocess_sample(
    sample: Sample,
    seed: int = 0,
    target_points: int = N_POINTS,
    image_size: int = IMAGE_SIZE,
) -> tuple[ProcessedPoints, ProcessedImage]:
    cleaned = remove_statistical_outliers(sample.points)
    points = normalize_points(downsample_points(cleaned, target_points, seed), target_points)
    points.source_count = len(sample.points)
    image = ProcessedImage(scale_unit_range(resize_bilinear(sample.image, image_size, image_size)))
    return points, image


def preprocess_batch(samples, seed: int = 0, target_points: int = N_POINTS, image_size: int = IMAGE_SIZE):
    """Stack preprocessed samples into (points, images, labels) arrays.

    Sample ``i`` uses seed ``seed + i``.
    """
    n = len(samples)
    pts = np.empty((n, target_points, 3))
    imgs = np.empty((n, image_size, image_size, 3))
    labels = np.empty(n, dtype=np.int64)
    for i, s in enumerate(samples):
        p, im = preprocess_sample(s, seed + i, target_points, image_size)
        pts[i], imgs[i], labels[i] = p.coords, im.data, s.class_id
    return pts, imgs, labels
