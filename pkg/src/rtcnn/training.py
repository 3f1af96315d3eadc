"""Cross-entropy objective, ADAM, the epoch loop and confusion-matrix evaluation."""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, ContractError, DataError
from .graph import Model, backward, forward, predict
from .weights import save_weights

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


def cross_entropy(probs: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. the softmax logits."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    n, k = probs.shape[:2]
    if labels.shape[0] != n:
        raise DataError(f"{labels.shape[0]} labels for a batch of {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DataError(f"labels must lie in [0, {k}), got range [{labels.min()}, {labels.max()}]")
    p = probs.reshape(n, k)
    picked = np.maximum(p[np.arange(n), labels], PROB_FLOOR)
    loss = float(-np.log(picked.astype(np.float64)).mean())
    d = p.copy()
    d[np.arange(n), labels] -= 1
    return loss, (d / n).reshape(probs.shape)


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def create(cls, params: dict[str, np.ndarray], **hyper) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, **hyper)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState):
    """One bias-corrected ADAM update, applied to ``params`` in place."""
    if not (params.keys() == grads.keys() == state.m.keys()):
        raise ContractError("parameter, gradient and optimizer key sets differ")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for k, p in params.items():
        g = grads[k]
        m, v = state.m[k], state.v[k]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
    return params, state


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-3
    schedule: str = "constant"  # or "plateau"
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    seed: int = 0
    checkpoint_path: str | None = None
    val_fraction: float = 0.2
    augment_flip: bool = False
    stop_at_train_acc: float | None = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("val_fraction must lie in (0, 1)")
        if self.schedule not in ("constant", "plateau"):
            raise ConfigError(f"unknown lr schedule {self.schedule!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_val_acc: float = -1.0
    best_epoch: int | None = None

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "train_acc", "val_acc"])
        for r in self.records:
            w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.train_acc:.6f}", f"{r.val_acc:.6f}"])
        return buf.getvalue()

    def write_csv(self, path) -> None:
        Path(path).write_text(self.to_csv())


@dataclass
class ConfusionMatrix:
    counts: np.ndarray  # rows: true class, columns: predicted class
    class_names: list[str]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @property
    def accuracy(self) -> float:
        return float(np.trace(self.counts)) / self.total if self.total else 0.0

    @property
    def empty_rows(self) -> list[int]:
        return [i for i, s in enumerate(self.counts.sum(axis=1)) if s == 0]

    def normalized(self) -> np.ndarray:
        """Row-normalised matrix; classes with no samples give all-zero rows."""
        support = self.counts.sum(axis=1, keepdims=True).astype(np.float64)
        return np.divide(self.counts, support, out=np.zeros(self.counts.shape), where=support > 0)

    def to_csv(self, normalized: bool = True) -> str:
        grid = self.normalized() if normalized else self.counts
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["true\\pred", *self.class_names])
        for name, row in zip(self.class_names, grid):
            w.writerow([name, *(f"{v:.6f}" if normalized else int(v) for v in row)])
        return buf.getvalue()


def confusion_matrix(labels, predictions, class_names) -> ConfusionMatrix:
    k = len(class_names)
    counts = np.zeros((k, k), dtype=np.int64)
    np.add.at(counts, (np.asarray(labels, dtype=np.int64), np.asarray(predictions, dtype=np.int64)), 1)
    return ConfusionMatrix(counts, list(class_names))


def _check_compatible(model: Model, dataset):
    if len(dataset.class_names) != model.num_classes:
        raise ConfigError(
            f"dataset has {len(dataset.class_names)} classes but the model head has {model.num_classes}")


def evaluate(model: Model, dataset) -> tuple[float, ConfusionMatrix]:
    _check_compatible(model, dataset)
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty dataset")
    preds = predict(model, dataset.images).reshape(len(dataset), -1).argmax(axis=1)
    cm = confusion_matrix(dataset.labels, preds, dataset.class_names)
    return cm.accuracy, cm


def _accuracy(model, images, labels):
    probs = predict(model, images)
    return float((probs.reshape(len(labels), -1).argmax(axis=1) == labels).mean())


def _train_mode_loss(model, images, labels, batch_size):
    """Training-mode loss over the training set, on a copy so running statistics stay put."""
    probe = model.copy()
    total = 0.0
    for start in range(0, len(labels), batch_size):
        probs, _ = forward(probe, images[start : start + batch_size], "train")
        total += cross_entropy(probs, labels[start : start + batch_size])[0] * len(probs)
    return total / len(labels)


def split_train_val(dataset, cfg: TrainConfig):
    """Use the FER ``Usage`` column when it separates training rows, else a seeded split."""
    usage = getattr(dataset, "usage", None)
    if usage is not None:
        is_train = np.array([u == "Training" for u in usage])
        if is_train.any() and not is_train.all():
            return dataset.subset(np.flatnonzero(is_train)), dataset.subset(np.flatnonzero(~is_train))
    order = np.random.default_rng(cfg.seed).permutation(len(dataset))
    n_val = max(1, int(round(cfg.val_fraction * len(dataset))))
    if n_val >= len(dataset):
        raise DataError("dataset too small to hold out a validation split")
    return dataset.subset(np.sort(order[n_val:])), dataset.subset(np.sort(order[:n_val]))


def train(model: Model, dataset, cfg: TrainConfig, val=None) -> History:
    """Train in place with ADAM; returns per-epoch history.

    ``train_loss`` is the training-mode loss over the training set at the end of
    each epoch (epoch 0: the untrained model), so consecutive records compare
    like with like. Accuracies are measured in inference mode after the epoch,
    exactly as ``evaluate`` would report them.
    """
    if len(dataset) == 0:
        raise DataError("cannot train on an empty dataset")
    _check_compatible(model, dataset)
    train_set, val_set = (dataset, val) if val is not None else split_train_val(dataset, cfg)
    rng = np.random.default_rng(cfg.seed)
    opt = AdamState.create(model.params, lr=cfg.lr)
    x_all = train_set.images.astype(model.dtype, copy=False)
    y_all = np.asarray(train_set.labels, dtype=np.int64)
    history = History()
    stale = 0

    loss = _train_mode_loss(model, x_all, y_all, cfg.batch_size)
    history.records.append(EpochRecord(0, loss, _accuracy(model, x_all, y_all), evaluate(model, val_set)[0]))

    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(y_all))
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.augment_flip:
                flip = rng.random(len(idx)) < 0.5
                xb = np.where(flip[:, None, None, None], xb[..., ::-1], xb)
            probs, trace = forward(model, xb, "train", keep_cache=True)
            _, d_logits = cross_entropy(probs, yb)
            grads = backward(model, trace, d_logits, from_logits=True)
            adam_step(model.params, grads, opt)

        loss = _train_mode_loss(model, x_all, y_all, cfg.batch_size)
        if not math.isfinite(loss):
            raise ContractError(f"training diverged at epoch {epoch}")
        acc = _accuracy(model, x_all, y_all)
        val_acc = evaluate(model, val_set)[0]
        history.records.append(EpochRecord(epoch, loss, acc, val_acc))
        log.info("epoch %d loss %.4f train_acc %.4f val_acc %.4f", epoch, loss, acc, val_acc)

        if val_acc > history.best_val_acc:
            history.best_val_acc, history.best_epoch, stale = val_acc, epoch, 0
            if cfg.checkpoint_path:
                save_weights(model, cfg.checkpoint_path)
        else:
            stale += 1
            if cfg.schedule == "plateau" and stale >= cfg.plateau_patience:
                opt.lr *= cfg.plateau_factor
                stale = 0
                log.info("plateau: learning rate now %g", opt.lr)
        if cfg.stop_at_train_acc is not None and acc >= cfg.stop_at_train_acc:
            break
    return history
