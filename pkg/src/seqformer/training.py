"""Classifier training and evaluation loops."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .convtrans import ConvTransModel, forward, predict
from .data import video_label_vote
from .metrics import accumulate, summary
from .optim import CLASSIFIER_RADAM, CosineSchedule, Optimizer, OptimizerConfig, clip_grad_norm, cross_entropy
from .rng import Rng

logger = logging.getLogger(__name__)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    train_accuracy: float
    val_accuracy: float | None = None
    lr: float = 0.0


@dataclass
class TrainResult:
    history: list[EpochRecord] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_state: list[np.ndarray] | None = None


def accuracy(model: ConvTransModel, x: np.ndarray, y: np.ndarray) -> float:
    if len(x) == 0:
        return float("nan")
    return float(np.mean(predict(model, x) == y))


def train_classifier(model: ConvTransModel, x: np.ndarray, y: np.ndarray, epochs: int, seed: int,
                     opt: OptimizerConfig = CLASSIFIER_RADAM, batch_size: int = 16,
                     cosine: bool = False, total_steps: int = 0, warmup_steps: int = 0, grad_clip: float = 0.0,
                     val: tuple[np.ndarray, np.ndarray] | None = None, stop_at_perfect: bool = False,
                     on_epoch=None) -> TrainResult:
    """Mini-batch cross-entropy training; keeps the parameters of the best epoch.

    "Best" is highest validation accuracy when ``val`` is given, else highest
    training accuracy; ties keep the earlier epoch.
    """
    x = np.asarray(x, dtype=model.dtype)
    y = np.asarray(y, dtype=np.int64)
    if np.any(y < 0):
        raise ValueError("training windows must all be labeled")
    n = len(x)
    steps_per_epoch = max(1, -(-n // batch_size))
    total = total_steps or epochs * steps_per_epoch
    schedule = CosineSchedule(opt.base_lr, total, warmup_steps) if cosine else None
    optimizer = Optimizer(model.parameters(), opt)
    order_rng = Rng.for_stage(seed, "classifier:batches")
    dropout_rng = Rng.for_stage(seed, "classifier:dropout") if model.config.dropout > 0 else None
    result = TrainResult()
    best = -1.0
    step = 0
    for epoch in range(epochs):
        perm = order_rng.permutation(n)
        epoch_loss = 0.0
        lr = opt.base_lr
        for start in range(0, n, batch_size):
            idx = perm[start:start + batch_size]
            optimizer.zero_grad()
            loss = ad.check_finite(cross_entropy(forward(model, x[idx], dropout_rng), y[idx]), "cross-entropy loss")
            ad.backward(loss)
            if grad_clip > 0:
                clip_grad_norm(model.parameters(), grad_clip)
            lr = schedule.lr_at(step) if schedule else opt.base_lr
            optimizer.step(lr=lr)
            step += 1
            result.step_losses.append(float(loss.data))
            epoch_loss += float(loss.data) * len(idx)
        rec = EpochRecord(epoch, epoch_loss / n, accuracy(model, x, y), lr=lr)
        if val is not None and len(val[0]):
            rec.val_accuracy = accuracy(model, np.asarray(val[0], dtype=model.dtype), val[1])
        score = rec.val_accuracy if rec.val_accuracy is not None else rec.train_accuracy
        if score > best:
            best = score
            result.best_epoch = epoch
            result.best_state = [a.copy() for a in model.state_arrays()]
        result.history.append(rec)
        logger.info("epoch %d loss %.6f train_acc %.4f val_acc %s", epoch, rec.loss, rec.train_accuracy, rec.val_accuracy)
        if on_epoch is not None:
            on_epoch(rec)
        if stop_at_perfect and rec.train_accuracy == 1.0:
            break
    return result


def evaluate(model: ConvTransModel, x: np.ndarray, y: np.ndarray, source_ids=None,
             vote: bool = False, weighted: bool = False, tie_break: str = "higher") -> dict:
    """Metrics summary over windows, or over per-source majority votes when ``vote``."""
    preds = predict(model, np.asarray(x, dtype=model.dtype))
    labels = np.asarray(y)
    if vote:
        if source_ids is None:
            raise ValueError("voting needs source ids")
        groups: dict[str, list[int]] = {}
        truth: dict[str, int] = {}
        for sid, p, t in zip(source_ids, preds, labels):
            groups.setdefault(sid, []).append(int(p))
            truth[sid] = int(t)
        keys = sorted(groups)
        preds = np.array([video_label_vote(groups[k], tie_break) for k in keys])
        labels = np.array([truth[k] for k in keys])
    cm = accumulate(preds, labels, model.config.num_classes)
    report = summary(cm, weighted=weighted)
    report["unit"] = "video" if vote else "window"
    return report
