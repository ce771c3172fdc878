"""Command-line entry point: ``lidar-voice <command> [options]``.

Exit codes: 0 success, 2 configuration error, 3 parse error (malformed
KITTI file or checkpoint), 4 I/O or ingestion error, 5 empty dataset.
"""

from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

import numpy as np

from . import kitti_io
from .config import ConfigError, RunConfig, load_run_config
from .kitti_io import CLASS_NAMES, PointCloud, Sample
from .model import CheckpointError, load_checkpoint, save_checkpoint
from .pipeline import detect, latency_summary, load_kitti_tree, to_arrays, train_val_arrays
from .preprocess import cluster_dbscan
from .synthetic import SyntheticSpec, write_kitti_layout
from .training import ArrayDataset, evaluate, fit, split_indices
from .viz import ply_text, svg_scatter
from .voice import CommandBackend, EchoBackend, FileSinkBackend, NullBackend

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_PARSE = 3
EXIT_IO = 4
EXIT_EMPTY = 5

log = logging.getLogger("lidar_voice")


class EmptyDatasetError(RuntimeError):
    pass


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.fit.seed = cfg.model.seed = args.seed
    for attr, target, key in (("mode", cfg.model, "mode"), ("width", cfg.model, "width"),
                              ("epochs", cfg.fit, "max_epochs"), ("data", cfg.data, "root"),
                              ("limit", cfg.data, "limit"), ("val_fraction", cfg.data, "val_fraction")):
        value = getattr(args, attr, None)
        if value is not None:
            setattr(target, key, value)
    if getattr(args, "no_calib", False):
        cfg.data.no_calib = True
    try:
        type(cfg.model)(**vars(cfg.model))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return cfg


def _load_samples(cfg: RunConfig):
    if not cfg.data.root:
        raise ConfigError("no dataset given (use --data or [data] root)")
    samples, hist = load_kitti_tree(cfg.data.root, cfg.data.no_calib, cfg.data.limit)
    log.info("loaded %d samples: %s", len(samples), hist)
    if not samples:
        raise EmptyDatasetError(f"dataset {cfg.data.root} yielded no samples")
    return samples, hist


def _metrics_text(name: str, loss: float, m) -> str:
    lines = [f"[{name}] accuracy={m.accuracy:.6f} loss={loss:.6f}",
             "class       precision  recall     f1"]
    for i, cls in enumerate(CLASS_NAMES):
        lines.append(f"{cls:<11} {m.precision[i]:.6f}   {m.recall[i]:.6f}   {m.f1[i]:.6f}")
    lines.append("confusion (rows=true, cols=predicted):")
    lines += ["  " + " ".join(f"{v:5d}" for v in row) for row in m.confusion]
    return "\n".join(lines)


def _make_backend(args):
    if args.backend == "echo":
        return EchoBackend()
    if args.backend == "file":
        if not args.transcript:
            raise ConfigError("--backend file needs --transcript")
        return FileSinkBackend(args.transcript)
    if args.backend == "command":
        if not args.command:
            raise ConfigError("--backend command needs --command")
        return CommandBackend(args.command, args.timeout_ms)
    return NullBackend()


def _frame_sample(args) -> Sample:
    cloud = kitti_io.read_velodyne_bin(Path(args.bin).read_bytes())
    image = kitti_io.read_image_file(args.image)
    if args.label:
        labels = kitti_io.parse_label_file(Path(args.label).read_text())
        if not 0 <= args.label_index < len(labels):
            raise ConfigError(f"label index {args.label_index} out of range ({len(labels)} labels)")
        calib = kitti_io.parse_calib_file(Path(args.calib).read_text()) if args.calib else None
        return kitti_io.extract_object_sample(cloud, image, labels[args.label_index], calib)
    # Without a label the whole scan is treated as one pre-cropped object;
    # class 0 is a placeholder that prediction ignores.
    dist = float(np.linalg.norm(cloud.points.mean(axis=0))) if len(cloud) else None
    return Sample(cloud, image, 0, dist)


# ---------------------------------------------------------------------------
# commands


def cmd_synth_data(args) -> int:
    if args.paper_ratio is not None:
        spec = SyntheticSpec.reference_ratio(args.paper_ratio, args.noise, args.seed or 0)
    else:
        spec = SyntheticSpec(tuple(args.counts), args.noise, args.seed or 0)
    stems = write_kitti_layout(spec, args.out)
    print(f"wrote {len(stems)} frames to {args.out} counts={dict(zip(CLASS_NAMES, spec.counts))}")
    return EXIT_OK


def cmd_preprocess(args) -> int:
    cfg = _run_config(args)
    cfg.model.n_points = args.target_points
    samples, hist = _load_samples(cfg)
    data = to_arrays(samples, cfg.model, cfg.fit.seed)
    np.savez_compressed(args.out, points=data.points, images=data.images, labels=data.labels)
    print(f"wrote {len(data)} samples to {args.out} histogram={hist}")
    if args.dbscan:
        for i, s in enumerate(samples):
            ids = cluster_dbscan(s.points, args.eps, args.min_samples)
            n_clusters = int(ids.max()) + 1 if len(ids) else 0
            print(f"sample={i} points={len(ids)} clusters={n_clusters} noise={int((ids < 0).sum())}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _run_config(args)
    samples, hist = _load_samples(cfg)
    train, val = train_val_arrays(samples, cfg.model, cfg.data.val_fraction, cfg.fit.seed)
    if len(train) == 0 or len(val) == 0:
        raise EmptyDatasetError("train/validation split left an empty side")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "best.ckpt"

    with (out / "epochs.log").open("w") as log_fh:
        def on_epoch(report):
            print(report.line(), flush=True)
            log_fh.write(report.line(with_time=False) + "\n")
            log_fh.flush()

        params, reports = fit(train, val, cfg.fit, cfg.model, checkpoint_path=ckpt, on_epoch=on_epoch)

    tr_loss, tr_m = evaluate(params, cfg.model, train, cfg.fit.class_weights)
    va_loss, va_m = evaluate(params, cfg.model, val, cfg.fit.class_weights)
    save_checkpoint(params, cfg.model, ckpt, extra={
        "epochs_run": len(reports), "val_fraction": cfg.data.val_fraction, "seed": cfg.fit.seed,
        "class_weights": list(cfg.fit.class_weights), "histogram": hist})
    metrics = {"train": {"loss": tr_loss, **tr_m.to_dict()}, "val": {"loss": va_loss, **va_m.to_dict()},
               "epochs_run": len(reports), "mode": cfg.model.mode}
    (out / "metrics.json").write_text(json.dumps(metrics, indent=2) + "\n")
    print(_metrics_text("train", tr_loss, tr_m))
    print(_metrics_text("val", va_loss, va_m))
    print(f"checkpoint={ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params, model_cfg, extra = load_checkpoint(args.checkpoint)
    cfg = _run_config(args)
    samples, _ = _load_samples(cfg)
    seed = extra.get("seed", cfg.fit.seed)
    data = to_arrays(samples, model_cfg, seed)
    if args.split != "all":
        tr, va = split_indices(len(data), extra.get("val_fraction", cfg.data.val_fraction), seed)
        data = data.subset(tr if args.split == "train" else va)
    if len(data) == 0:
        raise EmptyDatasetError("selected split is empty")
    weights = tuple(extra.get("class_weights", cfg.fit.class_weights))
    loss, metrics = evaluate(params, model_cfg, data, weights)
    if args.format == "json":
        print(json.dumps({"split": args.split, "loss": loss, **metrics.to_dict()}, indent=2))
    else:
        print(_metrics_text(args.split, loss, metrics))
    return EXIT_OK


def cmd_predict(args) -> int:
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    sample = _frame_sample(args)
    backend = _make_backend(args)
    det = detect(sample, params, model_cfg, backend, args.seed or 0)
    r = det.result
    print(f"class={r.class_name} class_id={r.class_id} confidence={r.confidence:.6f} "
          f"distance_m={r.distance_m if r.distance_m is not None else 'n/a'}")
    print(f"phrase={det.phrase.text!r} status={det.status.value}")
    print("latency " + det.latency.line())
    return EXIT_OK


def cmd_visualize(args) -> int:
    sample = _frame_sample(args)
    class_id = args.class_id if args.class_id is not None else (sample.class_id if args.label else None)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    Path(f"{prefix}.ply").write_text(ply_text(sample.points.points, class_id))
    Path(f"{prefix}.svg").write_text(svg_scatter(sample.points.points, class_id))
    image_out = Path(f"{prefix}_image{Path(args.image).suffix}")
    if args.label:
        image_out = Path(f"{prefix}_image.ppm")
        image_out.write_bytes(kitti_io.encode_ppm(sample.image))
    else:
        shutil.copyfile(args.image, image_out)
    print(f"wrote {prefix}.ply {prefix}.svg {image_out}")
    return EXIT_OK


def cmd_bench(args) -> int:
    if args.iterations < 1:
        raise ConfigError("--iterations must be >= 1")
    params, model_cfg, _ = load_checkpoint(args.checkpoint)
    cfg = _run_config(args)
    samples, _ = _load_samples(cfg)
    backend = _make_backend(args)
    reports = []
    for i in range(args.iterations):
        det = detect(samples[i % len(samples)], params, model_cfg, backend, i)
        reports.append(det.latency)
        print(f"iteration={i} " + det.latency.line())
    summary = latency_summary(reports)
    print(json.dumps(summary, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS lets the global flags appear before or after the verb.
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="INI run configuration")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="lidar-voice", parents=[common],
                                     description="LiDAR + RGB object classification with spoken results.")
    sub = parser.add_subparsers(dest="command", required=True)

    def dataset_opts(p):
        p.add_argument("--data", help="KITTI-layout root (velodyne/, image_2/, label_2/, calib/)")
        p.add_argument("--no-calib", action="store_true", help="labels are already in the velodyne frame")
        p.add_argument("--limit", type=int)
        p.add_argument("--val-fraction", type=float)

    def frame_opts(p):
        p.add_argument("--bin", required=True, help="velodyne .bin scan")
        p.add_argument("--image", required=True, help=".png or .ppm image")
        p.add_argument("--label", help="KITTI label file; crop one object from the frame")
        p.add_argument("--label-index", type=int, default=0)
        p.add_argument("--calib", help="KITTI calib file (omit for velodyne-frame labels)")

    def backend_opts(p, default):
        p.add_argument("--backend", choices=["echo", "file", "command", "none"], default=default)
        p.add_argument("--transcript", help="transcript path for --backend file")
        p.add_argument("--command", help="command template with {text} for --backend command")
        p.add_argument("--timeout-ms", type=int, default=2000)

    p = sub.add_parser("synth-data", parents=[common], help="write a synthetic KITTI-layout dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--counts", type=int, nargs=4, default=[10, 10, 10, 10],
                   metavar=("CAR", "PED", "CYC", "DC"))
    p.add_argument("--paper-ratio", type=int, metavar="TOTAL",
                   help="TOTAL samples split in the 2224/380/75/321 class ratio")
    p.add_argument("--noise", type=float, default=0.02, help="point noise sigma in metres")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("preprocess", parents=[common], help="ingest and condition samples into an .npz")
    dataset_opts(p)
    p.add_argument("--out", required=True)
    p.add_argument("--target-points", type=int, default=1024)
    p.add_argument("--dbscan", action="store_true", help="also report DBSCAN clusters per sample")
    p.add_argument("--eps", type=float, default=0.5)
    p.add_argument("--min-samples", type=int, default=5)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train and checkpoint the classifier")
    dataset_opts(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--mode", choices=["fused", "lidar_only"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--width", type=float, help="hidden-width multiplier (1.0 = full size)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="per-class metrics for a checkpoint")
    dataset_opts(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["all", "train", "val"], default="all")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", parents=[common], help="classify one frame and announce it")
    frame_opts(p)
    p.add_argument("--checkpoint", required=True)
    backend_opts(p, "echo")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("visualize", parents=[common], help="export PLY + SVG + image for a frame")
    frame_opts(p)
    p.add_argument("--out", required=True, help="output path prefix")
    p.add_argument("--class-id", type=int, choices=range(4))
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("bench", parents=[common], help="latency distribution over repeated detections")
    dataset_opts(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--iterations", type=int, default=20)
    backend_opts(p, "none")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (kitti_io.KittiFormatError, CheckpointError, kitti_io.InvalidLabelError,
            kitti_io.EmptyObjectError) as exc:
        print(f"parse error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except EmptyDatasetError as exc:
        print(f"empty dataset: {exc}", file=sys.stderr)
        return EXIT_EMPTY
    except (OSError, kitti_io.IngestionError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
