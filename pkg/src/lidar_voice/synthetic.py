"""Procedural stand-ins for KITTI objects.

Scenes use the camera axis convention (x right, y down, z forward) so that
an identity velodyne-to-camera calibration is exact. Coordinates are
rounded to float32 so that writing and re-reading a ``.bin`` is lossless.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kitti_io import (CLASS_NAMES, CalibData, ObjectLabel, PointCloud, RgbImage, Sample,
                       encode_ppm, format_calib_file, write_velodyne_bin)

IMAGE_SIZE = 224
REFERENCE_COUNTS = (2224, 380, 75, 321)

# (h, w, l) label dimensions per class.
CLASS_DIMS = {
    0: (1.5, 1.7, 4.0),
    1: (1.7, 0.5, 0.5),
    2: (1.7, 0.5, 1.8),
    3: (3.0, 3.0, 3.0),
}
WHEEL_RADIUS = 0.35
WHEEL_OFFSET = 0.55

# Wide-angle pinhole used for synthetic frames: principal point at the image
# centre, focal length giving an 85 degree half field of view.
SYNTH_P2 = np.array([[IMAGE_SIZE / 2 / math.tan(math.radians(85)), 0.0, IMAGE_SIZE / 2, 0.0],
                     [0.0, IMAGE_SIZE / 2 / math.tan(math.radians(85)), IMAGE_SIZE / 2, 0.0],
                     [0.0, 0.0, 1.0, 0.0]])


@dataclass
class SyntheticSpec:
    counts: tuple[int, int, int, int] = (10, 10, 10, 10)
    noise_sigma: float = 0.02
    seed: int = 0

    def __post_init__(self):
        self.counts = tuple(int(c) for c in self.counts)
        if len(self.counts) != 4 or min(self.counts) < 0:
            raise ValueError("counts must be four non-negative integers")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")

    @classmethod
    def reference_ratio(cls, total: int, noise_sigma: float = 0.02, seed: int = 0) -> SyntheticSpec:
        """Counts proportional to the 2224/380/75/321 class histogram."""
        ref = np.array(REFERENCE_COUNTS, dtype=np.float64)
        raw = ref / ref.sum() * total
        counts = np.floor(raw).astype(int)
        # Largest remainders take the leftover samples.
        for i in np.argsort(-(raw - counts), kind="stable")[: total - counts.sum()]:
            counts[i] += 1
        return cls(tuple(int(c) for c in counts), noise_sigma, seed)


@dataclass
class SyntheticObject:
    sample: Sample
    label: ObjectLabel
    center: np.ndarray
    yaw: float
    local_points: np.ndarray  # object frame, before noise


# ---------------------------------------------------------------------------
# surface samplers (object frame: x along length, y down, z across)


def _box_shell(rng, n, l, h, w):
    dims = np.array([l, h, w])
    areas = np.array([h * w, l * w, l * h])  # faces normal to x, y, z
    axis = rng.choice(3, size=n, p=areas / areas.sum())
    pts = (rng.random((n, 3)) - 0.5) * dims
    sign = rng.choice([-1.0, 1.0], size=n)
    pts[np.arange(n), axis] = sign * dims[axis] / 2
    return pts


def _ellipsoid_shell(rng, n, a, b, c):
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return v * np.array([a, b, c])


def _wheel_rings(rng, n, half_height):
    theta = rng.random(n) * 2 * math.pi
    side = np.where(rng.random(n) < 0.5, -WHEEL_OFFSET, WHEEL_OFFSET)
    x = side + WHEEL_RADIUS * np.cos(theta)
    y = half_height - WHEEL_RADIUS + WHEEL_RADIUS * np.sin(theta)
    return np.column_stack([x, y, np.zeros(n)])


def object_points(class_id: int, rng: np.random.Generator, n: int) -> np.ndarray:
    h, w, l = CLASS_DIMS[class_id]
    if class_id == 0:
        return _box_shell(rng, n, l, h, w)
    if class_id == 1:
        return _ellipsoid_shell(rng, n, 0.25, 0.85, 0.25)
    if class_id == 2:
        n_wheel = n // 3
        body = _ellipsoid_shell(rng, n - n_wheel, 0.25, 0.85, 0.25)
        return np.vstack([body, _wheel_rings(rng, n_wheel, h / 2)])
    return (rng.random((n, 3)) - 0.5) * 3.0


# ---------------------------------------------------------------------------
# images

_BACKGROUND = np.array([96, 96, 96])
_COLOURS = {0: (40, 80, 220), 1: (220, 60, 40), 2: (60, 200, 70)}


def paint_image(class_id: int, rng: np.random.Generator, size: int = IMAGE_SIZE) -> RgbImage:
    """Flat background with a class-coded silhouette."""
    img = np.empty((size, size, 3), dtype=np.float64)
    img[:] = _BACKGROUND + rng.integers(-12, 13, size=3)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    cx, cy = size / 2 + rng.uniform(-20, 20, size=2)
    scale = rng.uniform(0.8, 1.1)
    if class_id == 3:
        mask = rng.random((size, size)) < 0.35
        img[mask] = rng.integers(0, 256, size=(int(mask.sum()), 3))
    else:
        colour = np.array(_COLOURS[class_id]) + rng.integers(-15, 16, size=3)
        if class_id == 0:
            mask = (np.abs(xx - cx) <= 80 * scale) & (np.abs(yy - cy) <= 35 * scale)
        else:
            mask = ((xx - cx) / (22 * scale)) ** 2 + ((yy - cy) / (70 * scale)) ** 2 <= 1
            if class_id == 2:
                for dx in (-45, 45):
                    ring = np.hypot(xx - cx - dx * scale, yy - cy - 50 * scale)
                    mask |= np.abs(ring - 26 * scale) <= 5
        img[mask] = colour
    return RgbImage(size, size, np.clip(img, 0, 255).astype(np.uint8))


# ---------------------------------------------------------------------------
# samples


def _f32(a: np.ndarray) -> np.ndarray:
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def generate_synthetic_object(class_id: int, seed: int, noise_sigma: float = 0.02) -> SyntheticObject:
    if class_id not in (0, 1, 2, 3):
        raise ValueError(f"class_id {class_id} outside 0..3")
    rng = np.random.default_rng([seed, class_id])
    dist = rng.uniform(3.0, 30.0)
    azimuth = rng.uniform(-math.radians(20), math.radians(20))
    elevation = rng.uniform(-0.05, 0.1)  # slightly below the sensor on average
    center = _f32(dist * np.array([math.sin(azimuth) * math.cos(elevation), math.sin(elevation),
                                   math.cos(azimuth) * math.cos(elevation)]))
    yaw = float(np.float32(rng.uniform(-math.pi, math.pi)))

    n = int(rng.integers(400, 2001))
    local = object_points(class_id, rng, n)
    c, s = math.cos(yaw), math.sin(yaw)
    rot = np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    pts = local @ rot.T + center + rng.normal(scale=noise_sigma, size=(n, 3))
    cloud = PointCloud(_f32(pts), _f32(rng.random(n)))

    h, w, l = CLASS_DIMS[class_id]
    image = paint_image(class_id, rng)
    label = ObjectLabel(
        class_name=CLASS_NAMES[class_id],
        bbox2d=(0.0, 0.0, float(image.width), float(image.height)),
        dims=(h, w, l),
        location=(float(center[0]), float(center[1] + h / 2), float(center[2])),
        rotation_y=yaw,
    )
    sample = Sample(cloud, image, class_id, float(np.linalg.norm(center)))
    return SyntheticObject(sample, label, center, yaw, local)


def generate_synthetic_sample(class_id: int, seed: int, noise_sigma: float = 0.02) -> Sample:
    return generate_synthetic_object(class_id, seed, noise_sigma).sample


def class_order(counts) -> list[int]:
    """Round-robin over classes until every count is used up."""
    order = []
    remaining = list(counts)
    while any(remaining):
        for cls in range(4):
            if remaining[cls]:
                order.append(cls)
                remaining[cls] -= 1
    return order


def generate_samples(spec: SyntheticSpec) -> list[Sample]:
    """Samples in class-interleaved order, seeded per index."""
    order = class_order(spec.counts)
    return [generate_synthetic_sample(cls, spec.seed * 1_000_003 + i, spec.noise_sigma)
            for i, cls in enumerate(order)]


def write_kitti_layout(spec: SyntheticSpec, out_dir) -> list[str]:
    """Write one frame per synthetic object; returns the frame stems."""
    out = Path(out_dir)
    dirs = {name: out / name for name in ("velodyne", "image_2", "label_2", "calib")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    calib_text = format_calib_file(CalibData(p2=SYNTH_P2))
    stems = []
    order = class_order(spec.counts)
    for i, cls in enumerate(order):
        obj = generate_synthetic_object(cls, spec.seed * 1_000_003 + i, spec.noise_sigma)
        stem = f"{i:06d}"
        (dirs["velodyne"] / f"{stem}.bin").write_bytes(write_velodyne_bin(obj.sample.points))
        (dirs["image_2"] / f"{stem}.ppm").write_bytes(encode_ppm(obj.sample.image))
        (dirs["label_2"] / f"{stem}.txt").write_text(obj.label.to_line() + "\n")
        (dirs["calib"] / f"{stem}.txt").write_text(calib_text)
        stems.append(stem)
    return stems
