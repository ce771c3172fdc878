"""KITTI velodyne scans, labels, calibration files and raster images.

Class ids are fixed as 0=Car, 1=Pedestrian, 2=Cyclist, 3=DontCare. Any
other KITTI object type (Van, Truck, Tram, ...) folds into DontCare.
"""

from __future__ import annotations

import logging
import math
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

log = logging.getLogger(__name__)

CLASS_NAMES = ("Car", "Pedestrian", "Cyclist", "DontCare")
CLASS_IDS = {name: i for i, name in enumerate(CLASS_NAMES)}
DONTCARE = 3

# Inflation applied to label boxes before cropping points.
BOX_MARGIN = 0.10

# Fallback pinhole intrinsics (KITTI camera 2) for DontCare frustum crops
# when the calibration file carries no P2 entry.
DEFAULT_P2 = np.array(
    [[721.5377, 0.0, 609.5593, 44.85728],
     [0.0, 721.5377, 172.854, 0.2163791],
     [0.0, 0.0, 1.0, 0.002745884]]
)


class KittiFormatError(ValueError):
    """A KITTI file is malformed or truncated."""


class IngestionError(RuntimeError):
    """A frame cannot be assembled from the dataset tree."""


class EmptyObjectError(ValueError):
    """A label's crop contains no LiDAR points."""


class InvalidLabelError(ValueError):
    """A label's 2D box is degenerate."""


@dataclass
class PointCloud:
    points: np.ndarray
    intensities: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.intensities is not None:
            self.intensities = np.asarray(self.intensities, dtype=np.float64).reshape(-1)
            if len(self.intensities) != len(self.points):
                raise ValueError("intensities length must equal point count")

    def __len__(self) -> int:
        return len(self.points)


@dataclass
class ObjectLabel:
    class_name: str
    truncation: float = 0.0
    occlusion: int = 0
    alpha: float = 0.0
    bbox2d: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 0.0)
    dims: tuple[float, float, float] = (0.0, 0.0, 0.0)  # h, w, l
    location: tuple[float, float, float] = (0.0, 0.0, 0.0)  # camera frame, box bottom centre
    rotation_y: float = 0.0

    @property
    def class_id(self) -> int:
        return CLASS_IDS.get(self.class_name, DONTCARE)

    def to_line(self) -> str:
        vals = [self.truncation, self.occlusion, self.alpha, *self.bbox2d,
                *self.dims, *self.location, self.rotation_y]
        return self.class_name + " " + " ".join(_fmt(v) for v in vals)


@dataclass
class CalibData:
    tr_velo_to_cam: np.ndarray = field(default_factory=lambda: np.hstack([np.eye(3), np.zeros((3, 1))]))
    r0_rect: np.ndarray = field(default_factory=lambda: np.eye(3))
    p2: np.ndarray | None = None

    def velo_to_cam(self, pts: np.ndarray) -> np.ndarray:
        rot, t = self.tr_velo_to_cam[:, :3], self.tr_velo_to_cam[:, 3]
        return (pts @ rot.T + t) @ self.r0_rect.T

    def cam_to_velo(self, pts: np.ndarray) -> np.ndarray:
        rot, t = self.tr_velo_to_cam[:, :3], self.tr_velo_to_cam[:, 3]
        unrect = np.linalg.solve(self.r0_rect, np.atleast_2d(pts).T).T
        return np.linalg.solve(rot, (unrect - t).T).T


@dataclass
class RgbImage:
    width: int
    height: int
    pixels: np.ndarray  # uint8, shape (height, width, 3)

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.uint8).reshape(self.height, self.width, 3)


@dataclass
class Sample:
    points: PointCloud
    image: RgbImage
    class_id: int
    distance_m: float | None

    def __post_init__(self):
        if self.class_id not in (0, 1, 2, 3):
            raise ValueError(f"class_id {self.class_id} outside 0..3")


def _fmt(v: float) -> str:
    # repr keeps the text round-trip exact.
    return str(v) if isinstance(v, int) else repr(float(v))


# ---------------------------------------------------------------------------
# velodyne


def read_velodyne_bin(data: bytes) -> PointCloud:
    """Decode packed little-endian float32 (x, y, z, intensity) records."""
    if len(data) % 16:
        raise KittiFormatError(f"velodyne payload of {len(data)} bytes is not a multiple of 16")
    rec = np.frombuffer(data, dtype="<f4").reshape(-1, 4)
    if not np.isfinite(rec).all():
        raise KittiFormatError("velodyne payload contains non-finite values")
    rec = rec.astype(np.float64)
    return PointCloud(rec[:, :3], rec[:, 3])


def write_velodyne_bin(cloud: PointCloud) -> bytes:
    n = len(cloud)
    rec = np.empty((n, 4), dtype="<f4")
    rec[:, :3] = cloud.points
    rec[:, 3] = cloud.intensities if cloud.intensities is not None else 0.0
    return rec.tobytes()


# ---------------------------------------------------------------------------
# labels and calibration


def parse_label_file(text: str) -> list[ObjectLabel]:
    labels = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        fields = line.split()
        if not fields:
            continue
        if len(fields) != 15:
            raise KittiFormatError(f"label line {lineno}: expected 15 fields, got {len(fields)}")
        try:
            nums = [float(v) for v in fields[1:]]
            occlusion = int(float(fields[2]))
        except ValueError as exc:
            raise KittiFormatError(f"label line {lineno}: {exc}") from None
        name = fields[0] if fields[0] in CLASS_IDS else "DontCare"
        labels.append(ObjectLabel(
            class_name=name,
            truncation=nums[0],
            occlusion=occlusion,
            alpha=nums[2],
            bbox2d=tuple(nums[3:7]),
            dims=tuple(nums[7:10]),
            location=tuple(nums[10:13]),
            rotation_y=nums[13],
        ))
    return labels


def parse_calib_file(text: str) -> CalibData:
    entries = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        if ":" not in line:
            continue
        key, _, rest = line.partition(":")
        try:
            entries[key.strip()] = np.array([float(v) for v in rest.split()])
        except ValueError as exc:
            raise KittiFormatError(f"calib line {lineno}: {exc}") from None

    def take(key, n):
        if key not in entries:
            raise KittiFormatError(f"calib file has no {key} entry")
        if entries[key].size != n:
            raise KittiFormatError(f"{key}: expected {n} values, got {entries[key].size}")
        return entries[key]

    tr = take("Tr_velo_to_cam", 12).reshape(3, 4)
    r0 = take("R0_rect", 9).reshape(3, 3)
    for name, rot in (("Tr_velo_to_cam", tr[:, :3]), ("R0_rect", r0)):
        if abs(np.linalg.det(rot) - 1.0) > 1e-3:
            raise KittiFormatError(f"{name} rotation block is not a proper rotation")
    p2 = take("P2", 12).reshape(3, 4) if "P2" in entries else None
    return CalibData(tr, r0, p2)


def format_calib_file(calib: CalibData) -> str:
    lines = []
    if calib.p2 is not None:
        lines.append("P2: " + " ".join(repr(float(v)) for v in calib.p2.ravel()))
    lines.append("R0_rect: " + " ".join(repr(float(v)) for v in calib.r0_rect.ravel()))
    lines.append("Tr_velo_to_cam: " + " ".join(repr(float(v)) for v in calib.tr_velo_to_cam.ravel()))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# images

_PNG_DECODER: Callable[[bytes], np.ndarray] | None = None


def register_png_decoder(decoder: Callable[[bytes], np.ndarray] | None) -> None:
    """Install a callable turning PNG bytes into an (H, W, 3) uint8 array."""
    global _PNG_DECODER
    _PNG_DECODER = decoder


def _pillow_png(data: bytes) -> np.ndarray:
    import io

    from PIL import Image

    with Image.open(io.BytesIO(data)) as im:
        return np.asarray(im.convert("RGB"))


_PPM_HEADER = re.compile(rb"P6\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def load_image(data: bytes, fmt: str = "ppm_p6") -> RgbImage:
    if fmt == "ppm_p6":
        m = _PPM_HEADER.match(data)
        if not m:
            raise KittiFormatError("bad PPM magic or header")
        width, height, maxval = (int(g) for g in m.groups())
        if maxval != 255:
            raise KittiFormatError(f"unsupported PPM depth (maxval {maxval})")
        payload = data[m.end():]
        need = width * height * 3
        if len(payload) < need:
            raise KittiFormatError(f"truncated PPM payload: {len(payload)} < {need} bytes")
        pixels = np.frombuffer(payload[:need], dtype=np.uint8)
        return RgbImage(width, height, pixels.copy())
    if fmt == "png":
        if not data.startswith(b"\x89PNG\r\n\x1a\n"):
            raise KittiFormatError("bad PNG magic")
        decoder = _PNG_DECODER or _pillow_png
        try:
            arr = decoder(data)
        except ImportError:
            raise KittiFormatError("no PNG decoder registered") from None
        except Exception as exc:
            raise KittiFormatError(f"PNG decode failed: {exc}") from None
        return RgbImage(arr.shape[1], arr.shape[0], arr)
    raise ValueError(f"unknown image format {fmt!r}")


def encode_ppm(image: RgbImage) -> bytes:
    return b"P6\n%d %d\n255\n" % (image.width, image.height) + image.pixels.tobytes()


def read_image_file(path: str | os.PathLike) -> RgbImage:
    path = Path(path)
    fmt = "png" if path.suffix.lower() == ".png" else "ppm_p6"
    return load_image(path.read_bytes(), fmt)


# ---------------------------------------------------------------------------
# object extraction


def _yaw_matrix(ry: float) -> np.ndarray:
    c, s = math.cos(ry), math.sin(ry)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def box_center(label: ObjectLabel) -> np.ndarray:
    """Camera-frame box centre: the label location lifted by half the height (y points down)."""
    h = label.dims[0]
    x, y, z = label.location
    return np.array([x, y - h / 2.0, z])


def points_in_box(cam_pts: np.ndarray, label: ObjectLabel, margin: float = BOX_MARGIN) -> np.ndarray:
    """Boolean mask of camera-frame points inside the label's inflated oriented box."""
    h, w, l = label.dims
    local = (cam_pts - box_center(label)) @ _yaw_matrix(label.rotation_y)
    half = np.array([l, h, w]) * (1.0 + margin) / 2.0
    return np.all(np.abs(local) <= half, axis=1)


def points_in_frustum(cam_pts: np.ndarray, bbox2d, p2: np.ndarray) -> np.ndarray:
    homo = np.hstack([cam_pts, np.ones((len(cam_pts), 1))]) @ p2.T
    front = homo[:, 2] > 1e-9
    with np.errstate(divide="ignore", invalid="ignore"):
        u = homo[:, 0] / homo[:, 2]
        v = homo[:, 1] / homo[:, 2]
    left, top, right, bottom = bbox2d
    return front & (u >= left) & (u <= right) & (v >= top) & (v <= bottom)


def crop_image(image: RgbImage, bbox2d) -> RgbImage:
    left, top, right, bottom = bbox2d
    x0 = int(np.clip(math.floor(left), 0, image.width - 1))
    y0 = int(np.clip(math.floor(top), 0, image.height - 1))
    x1 = int(np.clip(math.ceil(right), x0 + 1, image.width))
    y1 = int(np.clip(math.ceil(bottom), y0 + 1, image.height))
    patch = image.pixels[y0:y1, x0:x1]
    return RgbImage(patch.shape[1], patch.shape[0], patch.copy())


def extract_object_sample(
    cloud: PointCloud,
    image: RgbImage,
    label: ObjectLabel,
    calib: CalibData | None,
) -> Sample:
    """Crop one labelled object out of a frame.

    ``calib=None`` treats label coordinates as already in the velodyne frame.
    """
    left, top, right, bottom = label.bbox2d
    if right - left <= 0 or bottom - top <= 0:
        raise InvalidLabelError(f"degenerate bbox2d {label.bbox2d}")
    calib_eff = calib if calib is not None else CalibData()
    cam_pts = calib_eff.velo_to_cam(cloud.points) if calib is not None else cloud.points

    if label.class_id == DONTCARE:
        p2 = calib_eff.p2 if calib_eff.p2 is not None else DEFAULT_P2
        mask = points_in_frustum(cam_pts, label.bbox2d, p2)
        distance = None
    else:
        mask = points_in_box(cam_pts, label)
        center = box_center(label)
        velo_center = calib_eff.cam_to_velo(center)[0] if calib is not None else center
        distance = float(np.linalg.norm(velo_center))
    if not mask.any():
        raise EmptyObjectError(f"no points inside the {label.class_name} crop")

    inten = cloud.intensities[mask] if cloud.intensities is not None else None
    crop = PointCloud(cloud.points[mask], inten)
    if distance is None:
        # DontCare carries no 3D box; fall back to the crop centroid.
        distance = float(np.linalg.norm(crop.points.mean(axis=0)))
    return Sample(crop, crop_image(image, label.bbox2d), label.class_id, distance)


# ---------------------------------------------------------------------------
# dataset traversal


def _find_image(image_dir: Path, stem: str) -> Path | None:
    for ext in (".png", ".ppm"):
        p = image_dir / f"{stem}{ext}"
        if p.exists():
            return p
    return None


def build_dataset(
    velodyne_dir,
    image_dir,
    label_dir,
    calib_dir=None,
    limit: int | None = None,
) -> tuple[list[Sample], dict[str, int]]:
    """Walk frames in lexicographic stem order and crop every label.

    ``calib_dir=None`` means labels are already in the velodyne frame.
    Returns the samples and a per-class histogram.
    """
    velodyne_dir, image_dir, label_dir = Path(velodyne_dir), Path(image_dir), Path(label_dir)
    hist = {name: 0 for name in CLASS_NAMES}
    samples: list[Sample] = []
    if limit is not None and limit <= 0:
        return samples, hist

    for bin_path in sorted(velodyne_dir.glob("*.bin")):
        stem = bin_path.stem
        label_path = label_dir / f"{stem}.txt"
        img_path = _find_image(image_dir, stem)
        calib_path = Path(calib_dir) / f"{stem}.txt" if calib_dir is not None else None
        missing = []
        if not label_path.exists():
            missing.append("label")
        if img_path is None:
            missing.append("image")
        if calib_path is not None and not calib_path.exists():
            missing.append("calib")
        if missing:
            raise IngestionError(f"frame {stem}: missing {', '.join(missing)} file")

        try:
            cloud = read_velodyne_bin(bin_path.read_bytes())
            image = read_image_file(img_path)
            labels = parse_label_file(label_path.read_text())
            calib = parse_calib_file(calib_path.read_text()) if calib_path else None
        except KittiFormatError as exc:
            raise KittiFormatError(f"frame {stem}: {exc}") from None

        for k, label in enumerate(labels):
            try:
                sample = extract_object_sample(cloud, image, label, calib)
            except (EmptyObjectError, InvalidLabelError) as exc:
                log.warning("frame %s label %d skipped: %s", stem, k, exc)
                continue
            samples.append(sample)
            hist[CLASS_NAMES[sample.class_id]] += 1
            if limit is not None and len(samples) >= limit:
                return samples, hist
    return samples, hist
