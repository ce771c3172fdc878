"""Fused LiDAR + RGB PointNet classifier.

The LiDAR branch is a T-Net predicted 3x3 alignment followed by shared
per-point dense layers and a global max pool. The RGB branch is three
conv/relu/pool stages and a dense layer. Both features are concatenated
and classified by a small dense head into four classes.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .kitti_io import CLASS_NAMES

CHECKPOINT_MAGIC = b"LVCKPT\n"
CHECKPOINT_VERSION = 1

# Full-size widths; ModelConfig.width scales every hidden width.
TNET_POINT_WIDTHS = (64, 128, 1024)
TNET_FC_WIDTHS = (512, 256)
LIDAR_WIDTHS = (64, 64, 128, 1024)
RGB_CONV_WIDTHS = (32, 64, 128)
RGB_FEATURE = 512
HEAD_WIDTHS = (512, 256)
N_CLASSES = 4


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    dropout_rate: float = 0.4
    ortho_weight: float = 0.001
    mode: str = "fused"
    seed: int = 0
    width: float = 1.0
    image_size: int = 224
    n_points: int = 1024

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.ortho_weight < 0:
            raise ValueError("ortho_weight must be >= 0")
        if self.mode not in ("fused", "lidar_only"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.image_size % 8:
            raise ValueError("image_size must be divisible by 8")

    def scaled(self, n: int) -> int:
        return max(2, int(round(n * self.width)))


@dataclass
class DetectionResult:
    class_id: int
    confidence: float
    distance_m: float | None = None
    probabilities: list[float] = field(default_factory=list)

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]


def layer_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Weight shapes by parameter name, in a fixed order."""
    s = config.scaled
    shapes: dict[str, tuple[int, ...]] = {}

    def dense(name, n_in, n_out):
        shapes[f"{name}.w"] = (n_in, n_out)
        shapes[f"{name}.b"] = (n_out,)

    prev = 3
    for i, w in enumerate(TNET_POINT_WIDTHS, 1):
        dense(f"tnet.pd{i}", prev, s(w))
        prev = s(w)
    for i, w in enumerate(TNET_FC_WIDTHS, 1):
        dense(f"tnet.fc{i}", prev, s(w))
        prev = s(w)
    dense("tnet.out", prev, 9)

    prev = 3
    for i, w in enumerate(LIDAR_WIDTHS, 1):
        dense(f"lidar.pd{i}", prev, s(w))
        prev = s(w)
    lidar_feat = prev

    prev = 3
    for i, w in enumerate(RGB_CONV_WIDTHS, 1):
        shapes[f"rgb.conv{i}.k"] = (3, 3, prev, s(w))
        shapes[f"rgb.conv{i}.b"] = (s(w),)
        prev = s(w)
    side = config.image_size // 8
    dense("rgb.fc", side * side * prev, s(RGB_FEATURE))

    prev = lidar_feat + s(RGB_FEATURE)
    for i, w in enumerate(HEAD_WIDTHS, 1):
        dense(f"head.fc{i}", prev, s(w))
        prev = s(w)
    dense("head.out", prev, N_CLASSES)
    return shapes


def init_params(config: ModelConfig) -> dict[str, Tensor]:
    """Glorot-uniform weights, zero biases, identity-initialised T-Net output."""
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in layer_shapes(config).items():
        if name == "tnet.out.w":
            data = np.zeros(shape)
        elif name == "tnet.out.b":
            data = np.eye(3).ravel()
        elif name.endswith(".b"):
            data = np.zeros(shape)
        else:
            receptive = int(np.prod(shape[:-2])) if len(shape) > 2 else 1
            fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape)
        params[name] = ad.parameter(data)
    return params


def _dense(params, name, x, activate=True):
    y = ad.matmul_bias(x, params[f"{name}.w"], params[f"{name}.b"])
    return ad.relu(y) if activate else y


def _point_dense(params, name, x):
    return ad.relu(ad.shared_point_dense(x, params[f"{name}.w"], params[f"{name}.b"]))


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def tnet_forward(params, x) -> tuple[Tensor, Tensor]:
    """Predict a per-sample 3x3 transform and its orthogonality penalty."""
    x = _as_tensor(x)
    if x.data.ndim != 3 or x.shape[2] != 3:
        raise ad.ShapeError(f"points must be [B, N, 3], got {x.shape}")
    h = x
    for i in range(1, len(TNET_POINT_WIDTHS) + 1):
        h = _point_dense(params, f"tnet.pd{i}", h)
    h = ad.global_max_pool(h)
    for i in range(1, len(TNET_FC_WIDTHS) + 1):
        h = _dense(params, f"tnet.fc{i}", h)
    out = _dense(params, "tnet.out", h, activate=False)
    transform = ad.reshape(out, (x.shape[0], 3, 3))
    return transform, ad.orthogonality_penalty(transform)


def lidar_branch_forward(params, x, use_tnet: bool = True) -> tuple[Tensor, Tensor]:
    x = _as_tensor(x)
    if use_tnet:
        transform, penalty = tnet_forward(params, x)
        h = ad.batched_matmul(x, transform)
    else:
        h, penalty = x, Tensor(0.0)
    for i in range(1, len(LIDAR_WIDTHS) + 1):
        h = _point_dense(params, f"lidar.pd{i}", h)
    return ad.global_max_pool(h), penalty


def rgb_branch_forward(params, img) -> Tensor:
    h = _as_tensor(img)
    if h.data.ndim != 4 or h.shape[3] != 3:
        raise ad.ShapeError(f"images must be [B, H, W, 3], got {h.shape}")
    for i in range(1, len(RGB_CONV_WIDTHS) + 1):
        h = ad.conv2d(h, params[f"rgb.conv{i}.k"], params[f"rgb.conv{i}.b"])
        h = ad.maxpool2d(ad.relu(h))
    expected = params["rgb.fc.w"].shape[0]
    flat = ad.reshape(h, (h.shape[0], -1))
    if flat.shape[1] != expected:
        raise ad.ShapeError(f"image flattens to {flat.shape[1]} features, model expects {expected}")
    return _dense(params, "rgb.fc", flat)


def model_forward(params, config: ModelConfig, points, images, targets=None,
                  training: bool = False, rng=None, class_weights=(1.0, 5.0, 20.0, 5.0),
                  use_tnet: bool = True):
    """Return ``(logits, loss)``; ``loss`` is None when no targets are given.

    ``rng`` (seed or Generator) drives dropout when ``training`` is set.
    """
    points = _as_tensor(points)
    bsz = points.shape[0]
    lidar_feat, penalty = lidar_branch_forward(params, points, use_tnet=use_tnet)
    rgb_width = params["rgb.fc.w"].shape[1]
    if config.mode == "lidar_only":
        rgb_feat = Tensor(np.zeros((bsz, rgb_width)))
    else:
        images = _as_tensor(images)
        if images.shape[0] != bsz:
            raise ad.ShapeError(f"batch mismatch: {bsz} point sets, {images.shape[0]} images")
        rgb_feat = rgb_branch_forward(params, images)

    if training and not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(config.seed if rng is None else rng)
    h = ad.concat([lidar_feat, rgb_feat])
    for i in range(1, len(HEAD_WIDTHS) + 1):
        h = _dense(params, f"head.fc{i}", h)
        h = ad.dropout(h, config.dropout_rate, training, rng)
    logits = _dense(params, "head.out", h, activate=False)
    if targets is None:
        return logits, None
    loss = ad.weighted_softmax_ce(logits, targets, class_weights)
    if config.ortho_weight and use_tnet:
        loss = loss + penalty * config.ortho_weight
    return logits, loss


def result_from_logits(logits: np.ndarray, distance_m: float | None = None) -> DetectionResult:
    probs = ad.softmax(np.asarray(logits, dtype=np.float64))
    cls = int(np.argmax(probs))  # first maximum wins ties
    return DetectionResult(cls, float(probs[cls]), distance_m, probs.tolist())


def predict(params, config: ModelConfig, points: np.ndarray, image: np.ndarray,
            distance_m: float | None = None) -> DetectionResult:
    """Classify one preprocessed (points, image) pair with dropout disabled."""
    logits, _ = model_forward(params, config, points[None], image[None], training=False)
    return result_from_logits(logits.data[0], distance_m)


def predict_logits(params, config: ModelConfig, points: np.ndarray, images: np.ndarray,
                   batch_size: int = 8) -> np.ndarray:
    out = []
    for start in range(0, len(points), batch_size):
        stop = start + batch_size
        logits, _ = model_forward(params, config, points[start:stop], images[start:stop])
        out.append(logits.data)
    return np.concatenate(out) if out else np.zeros((0, N_CLASSES))


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(params, config: ModelConfig, path, extra: dict | None = None) -> None:
    """Write a JSON header line followed by the packed float64 payload."""
    directory, chunks, offset = [], [], 0
    for name, t in params.items():
        raw = np.ascontiguousarray(t.data, dtype="<f8").tobytes()
        directory.append({"name": name, "shape": list(t.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(config),
        "tensors": directory,
        "payload_bytes": len(payload),
        "sha256": hashlib.sha256(payload).hexdigest(),
    }
    if extra:
        header["extra"] = extra
    Path(path).write_bytes(CHECKPOINT_MAGIC + json.dumps(header).encode() + b"\n" + payload)


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    blob = Path(path).read_bytes()
    if not blob.startswith(CHECKPOINT_MAGIC):
        raise CheckpointError("not a checkpoint file")
    end = blob.find(b"\n", len(CHECKPOINT_MAGIC))
    if end < 0:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(blob[len(CHECKPOINT_MAGIC):end])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unreadable header: {exc}") from None
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    payload = blob[end + 1:]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(f"payload is {len(payload)} bytes, header says {header['payload_bytes']}")
    if hashlib.sha256(payload).hexdigest() != header["sha256"]:
        raise CheckpointError("payload checksum mismatch")

    params = {}
    for entry in header["tensors"]:
        n = int(np.prod(entry["shape"])) * 8
        if n != entry["nbytes"] or entry["offset"] + n > len(payload):
            raise CheckpointError(f"tensor {entry['name']} disagrees with payload layout")
        arr = np.frombuffer(payload, dtype="<f8", count=n // 8, offset=entry["offset"])
        params[entry["name"]] = ad.parameter(arr.reshape(entry["shape"]).astype(np.float64))
    return params, ModelConfig(**header["config"]), header.get("extra", {})
