"""Adam training loop with plateau LR decay, early stopping and class metrics."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import autodiff as ad
from .model import ModelConfig, init_params, model_forward, save_checkpoint

log = logging.getLogger(__name__)

IMPROVEMENT_DELTA = 1e-4
LR_FLOOR = 1e-6


@dataclass
class FitConfig:
    lr0: float = 0.0005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 50
    early_stop_patience: int = 15
    plateau_patience: int = 5
    plateau_factor: float = 0.5
    class_weights: tuple[float, ...] = (1.0, 5.0, 20.0, 5.0)
    seed: int = 0
    grad_clip: float | None = None

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in self.class_weights)
        if not 0.0 < self.plateau_factor < 1.0:
            raise ValueError("plateau_factor must lie in (0, 1)")
        for name in ("lr0", "beta1", "beta2", "eps", "batch_size", "max_epochs",
                     "early_stop_patience", "plateau_patience"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if len(self.class_weights) != 4 or min(self.class_weights) <= 0:
            raise ValueError("class_weights must be four positive numbers")


class ArrayDataset(NamedTuple):
    points: np.ndarray  # (n, n_points, 3)
    images: np.ndarray  # (n, s, s, 3)
    labels: np.ndarray  # (n,)

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> ArrayDataset:
        return ArrayDataset(self.points[idx], self.images[idx], self.labels[idx])


def split_indices(n: int, val_fraction: float = 0.2, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Seeded shuffle split; 0.2 gives the 2400/600 proportion on 3000 samples."""
    perm = np.random.default_rng(seed).permutation(n)
    n_val = int(round(n * val_fraction))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class OptimizerState:
    lr: float
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied to ``params`` in place."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, theta in params.items():
        g = grads[name]
        if g.shape != theta.shape:
            raise ad.ShapeError(f"{name}: grad {g.shape} vs param {theta.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        theta -= state.lr * (m / c1) / (np.sqrt(v / c2) + eps)


# ---------------------------------------------------------------------------
# schedule controllers


class PlateauController:
    """Multiply the LR by ``factor`` after ``patience`` epochs without improvement."""

    def __init__(self, lr: float, patience: int = 5, factor: float = 0.5,
                 delta: float = IMPROVEMENT_DELTA, floor: float = LR_FLOOR):
        self.lr, self.patience, self.factor = lr, patience, factor
        self.delta, self.floor = delta, floor
        self.best = np.inf
        self.wait = 0

    def update(self, val_loss: float) -> float:
        if val_loss < self.best - self.delta:
            self.best, self.wait = val_loss, 0
        else:
            self.wait += 1
            if self.wait >= self.patience:
                self.lr = max(self.lr * self.factor, self.floor)
                self.wait = 0
        return self.lr


class EarlyStopper:
    def __init__(self, patience: int = 15, delta: float = IMPROVEMENT_DELTA):
        self.patience, self.delta = patience, delta
        self.best = np.inf
        self.best_epoch = 0
        self.wait = 0
        self.epoch = 0

    def update(self, val_loss: float) -> bool:
        """Record one epoch; True means stop."""
        self.epoch += 1
        if val_loss < self.best - self.delta:
            self.best, self.best_epoch, self.wait = val_loss, self.epoch, 0
            return False
        self.wait += 1
        return self.wait >= self.patience


def lr_plateau_update(history: Sequence[float], lr0: float = 0.0005, patience: int = 5,
                      factor: float = 0.5) -> list[float]:
    """Replay a val-loss history; returns the LR in force after each epoch."""
    ctl = PlateauController(lr0, patience, factor)
    return [ctl.update(v) for v in history]


def early_stop_update(history: Sequence[float], patience: int = 15) -> tuple[int | None, int]:
    """Replay a val-loss history; returns (stop epoch or None, best epoch), 1-based."""
    stopper = EarlyStopper(patience)
    for v in history:
        if stopper.update(v):
            return stopper.epoch, stopper.best_epoch
    return None, stopper.best_epoch


# ---------------------------------------------------------------------------
# metrics


@dataclass
class ClassMetrics:
    confusion: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    accuracy: float

    @classmethod
    def from_confusion(cls, confusion) -> ClassMetrics:
        conf = np.asarray(confusion, dtype=np.int64)
        diag = np.diag(conf).astype(np.float64)
        col, row = conf.sum(axis=0), conf.sum(axis=1)
        precision = np.divide(diag, col, out=np.zeros_like(diag), where=col > 0)
        recall = np.divide(diag, row, out=np.zeros_like(diag), where=row > 0)
        denom = precision + recall
        f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(diag), where=denom > 0)
        total = conf.sum()
        return cls(conf, precision, recall, f1, float(diag.sum() / total) if total else 0.0)

    @classmethod
    def from_predictions(cls, y_true, y_pred, n_classes: int = 4) -> ClassMetrics:
        conf = np.zeros((n_classes, n_classes), dtype=np.int64)
        np.add.at(conf, (np.asarray(y_true), np.asarray(y_pred)), 1)
        return cls.from_confusion(conf)

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "confusion": self.confusion.tolist(),
        }


def evaluate(params, model_config: ModelConfig, data: ArrayDataset,
             class_weights=(1.0, 5.0, 20.0, 5.0), batch_size: int = 8) -> tuple[float, ClassMetrics]:
    """Inference-mode loss (sample-weighted mean) and class metrics."""
    if len(data) == 0:
        raise ValueError("cannot evaluate an empty dataset")
    loss_sum, preds = 0.0, []
    for start in range(0, len(data), batch_size):
        batch = data.subset(slice(start, start + batch_size))
        logits, loss = model_forward(params, model_config, batch.points, batch.images,
                                     batch.labels, training=False, class_weights=class_weights)
        loss_sum += float(loss.data) * len(batch)
        preds.append(logits.data.argmax(axis=1))
    return loss_sum / len(data), ClassMetrics.from_predictions(data.labels, np.concatenate(preds))


def evaluate_metrics(params, model_config: ModelConfig, data: ArrayDataset) -> ClassMetrics:
    return evaluate(params, model_config, data)[1]


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochReport:
    epoch: int
    train_acc: float
    train_loss: float
    val_acc: float
    val_loss: float
    lr: float
    wall_ms: float
    running_acc: float = 0.0
    running_loss: float = 0.0

    def line(self, with_time: bool = True) -> str:
        parts = [f"epoch={self.epoch}", f"train_acc={self.train_acc:.6f}", f"train_loss={self.train_loss:.6f}",
                 f"val_acc={self.val_acc:.6f}", f"val_loss={self.val_loss:.6f}", f"lr={self.lr:.8g}",
                 f"running_acc={self.running_acc:.6f}", f"running_loss={self.running_loss:.6f}"]
        if with_time:
            parts.append(f"wall_ms={self.wall_ms:.1f}")
        return " ".join(parts)


def train_epoch(params, state: OptimizerState, data: ArrayDataset, fit_config: FitConfig,
                model_config: ModelConfig, epoch: int) -> tuple[float, float]:
    """One seeded pass over ``data``; returns (mean loss, accuracy) from the training-mode passes."""
    if len(data) == 0:
        raise ValueError("cannot train on an empty dataset")
    order = np.random.default_rng(fit_config.seed + epoch).permutation(len(data))
    dropout_rng = np.random.default_rng([fit_config.seed, epoch])
    names = list(params)
    loss_sum, correct = 0.0, 0
    for start in range(0, len(data), fit_config.batch_size):
        batch = data.subset(order[start:start + fit_config.batch_size])
        for t in params.values():
            t.zero_grad()
        logits, loss = model_forward(params, model_config, batch.points, batch.images, batch.labels,
                                     training=True, rng=dropout_rng,
                                     class_weights=fit_config.class_weights)
        loss.backward()
        grads = {n: params[n].grad for n in names}
        if fit_config.grad_clip is not None:
            norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            if norm > fit_config.grad_clip:
                grads = {n: g * (fit_config.grad_clip / norm) for n, g in grads.items()}
        adam_step({n: params[n].data for n in names}, grads, state,
                  fit_config.beta1, fit_config.beta2, fit_config.eps)
        loss_sum += float(loss.data) * len(batch)
        correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
    return loss_sum / len(data), correct / len(data)


def snapshot(params) -> dict[str, np.ndarray]:
    return {n: t.data.copy() for n, t in params.items()}


def restore(params, saved: dict[str, np.ndarray]) -> None:
    for n, arr in saved.items():
        params[n].data = arr.copy()


def fit(train: ArrayDataset, val: ArrayDataset, fit_config: FitConfig | None = None,
        model_config: ModelConfig | None = None, params=None, checkpoint_path=None,
        on_epoch: Callable[[EpochReport], None] | None = None):
    """Train with plateau LR decay and early stopping on validation loss.

    Returns the parameters of the best-validation-loss epoch and the list of
    epoch reports. Train metrics in each report come from an inference-mode
    pass over the training split after the epoch's updates.
    """
    fit_config = fit_config or FitConfig()
    model_config = model_config or ModelConfig()
    if params is None:
        params = init_params(model_config)
    state = OptimizerState(lr=fit_config.lr0)
    plateau = PlateauController(fit_config.lr0, fit_config.plateau_patience, fit_config.plateau_factor)
    stopper = EarlyStopper(fit_config.early_stop_patience)
    best = snapshot(params)
    reports: list[EpochReport] = []

    for epoch in range(1, fit_config.max_epochs + 1):
        t0 = time.perf_counter()
        run_loss, run_acc = train_epoch(params, state, train, fit_config, model_config, epoch)
        tr_loss, tr_metrics = evaluate(params, model_config, train, fit_config.class_weights)
        if val is train:  # overfit runs validate on the training set; skip the duplicate pass
            va_loss, va_metrics = tr_loss, tr_metrics
        else:
            va_loss, va_metrics = evaluate(params, model_config, val, fit_config.class_weights)
        lr_used = state.lr
        improved = va_loss < stopper.best - IMPROVEMENT_DELTA
        stop = stopper.update(va_loss)
        state.lr = plateau.update(va_loss)
        if improved:
            best = snapshot(params)
            if checkpoint_path is not None:
                save_checkpoint(params, model_config, checkpoint_path, extra={"epoch": epoch})
        report = EpochReport(epoch, tr_metrics.accuracy, tr_loss, va_metrics.accuracy, va_loss, lr_used,
                             (time.perf_counter() - t0) * 1000.0, run_acc, run_loss)
        reports.append(report)
        log.info(report.line())
        if on_epoch is not None:
            on_epoch(report)
        if stop:
            log.info("early stop at epoch %d (best epoch %d)", epoch, stopper.best_epoch)
            break

    restore(params, best)
    return params, reports
