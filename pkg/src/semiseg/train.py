"""Mini-batch training with Adam, prediction and evaluation."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .augment import AugmentationPolicy, apply_policy
from .data import SliceSample
from .losses import CLASS_NAMES, DiceReport, evaluate_set, segmentation_loss
from .networks import NetworkInstance, save_checkpoint

log = logging.getLogger(__name__)

LOSSES = ("cross_entropy", "dice", "sum_of_both")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 30
    batch_size: int = 8
    loss: str = "sum_of_both"
    seed: int = 0
    augmentation: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    eval_every: int = 1
    keep_best: bool = True

    def validate(self) -> None:
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.eval_every < 1:
            raise ValueError("eval_every must be >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_dice: DiceReport | None
    wall_seconds: float = 0.0

    def key(self) -> tuple:
        """Everything except timing, for determinism comparisons."""
        vd = None if self.val_dice is None else (tuple(sorted(self.val_dice.per_class.items())), self.val_dice.average)
        return (self.epoch, self.train_loss, vd)


def _stack_images(samples: Sequence[SliceSample], dtype) -> np.ndarray:
    return np.stack([s.image for s in samples]).astype(dtype)[:, None]


def train_step(net: NetworkInstance, images: np.ndarray, masks: np.ndarray, loss_kind: str,
               lr: float) -> float:
    logits = net.forward(images)
    loss = segmentation_loss(logits, masks, loss_kind)
    value = loss.item()
    if not math.isfinite(value):
        return value
    ad.backward(loss)
    ad.adam_step(net.parameters, lr)
    return value


def train(net: NetworkInstance, train_set: Sequence[SliceSample], val_set: Sequence[SliceSample],
          config: TrainConfig, metrics_csv: str | Path | None = None,
          checkpoint_path: str | Path | None = None) -> tuple[NetworkInstance, list[EpochMetrics]]:
    """Train in place and return the network holding the best-validation weights.

    Each epoch shuffles with a generator keyed on (seed, epoch) and augments
    every sample with ``draw_index = epoch``, so a run is fully determined by
    its configuration.
    """
    config.validate()
    if not train_set:
        raise ValueError("train: empty training set")
    unlabeled = [s.sample_id for s in train_set if s.mask is None]
    if unlabeled:
        raise ValueError(f"train: {len(unlabeled)} training samples lack masks (e.g. {unlabeled[0]})")
    dtype = np.dtype(net.config.dtype)
    history: list[EpochMetrics] = []
    best_score, best_state = -math.inf, None
    writer = None
    fh = None
    if metrics_csv is not None:
        fh = open(metrics_csv, "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "split", "class", "dice", f"loss_{config.loss}"])
    try:
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            order = np.random.default_rng([config.seed & 0xFFFFFFFF, epoch]).permutation(len(train_set))
            losses = []
            for b, start in enumerate(range(0, len(order), config.batch_size)):
                batch = [apply_policy(train_set[i], config.augmentation, epoch)
                         for i in order[start:start + config.batch_size]]
                images = _stack_images(batch, dtype)
                masks = np.stack([s.mask for s in batch])
                value = train_step(net, images, masks, config.loss, config.learning_rate)
                if not math.isfinite(value):
                    raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b}")
                losses.append(value * len(batch))
            train_loss = float(np.sum(losses) / len(train_set))
            val = None
            if val_set and (epoch % config.eval_every == 0 or epoch == config.epochs):
                val = evaluate(net, val_set)
                if config.keep_best and val.average > best_score:
                    best_score, best_state = val.average, net.state()
                    if checkpoint_path is not None:
                        save_checkpoint(net, checkpoint_path, extra={"epoch": epoch, "val_average": val.average})
            m = EpochMetrics(epoch, train_loss, val, time.perf_counter() - t0)
            history.append(m)
            log.info("epoch %d loss %.4f val %s", epoch, train_loss,
                     "-" if val is None else f"{val.average:.4f}")
            if writer is not None:
                writer.writerow([epoch, "train", "", "", f"{train_loss:.8f}"])
                if val is not None:
                    for k, v in sorted(val.per_class.items()):
                        writer.writerow([epoch, "val", CLASS_NAMES[k], f"{v:.6f}", ""])
                    writer.writerow([epoch, "val", "AVG", f"{val.average:.6f}", ""])
    finally:
        if fh is not None:
            fh.close()
    if best_state is not None:
        net.load_state(best_state)
    elif checkpoint_path is not None:
        save_checkpoint(net, checkpoint_path, extra={"epoch": config.epochs})
    return net, history


def _as_batch(samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        arr = samples
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim == 3:
            arr = arr[:, None]
        return arr
    return np.stack([s.image for s in samples])[:, None]


def predict(net, samples, batch_size: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Argmax masks (N, H, W) and softmax probabilities (N, C, H, W).

    ``net`` is anything with ``forward`` and a ``config`` carrying ``depth``;
    ties in the argmax go to the lower class index.
    """
    x = _as_batch(samples)
    if len(x) == 0:
        raise ValueError("predict: no samples")
    m = 2 ** net.config.depth
    if x.shape[2] % m or x.shape[3] % m:
        raise ad.ShapeError(f"spatial dims {x.shape[2]}x{x.shape[3]} not divisible by 2**depth = {m}")
    probs = []
    with ad.no_grad():
        for start in range(0, len(x), batch_size):
            logits = net.forward(x[start:start + batch_size])
            probs.append(ad.softmax_channels(logits).data)
    p = np.concatenate(probs).astype(np.float64)
    return p.argmax(axis=1), p


def evaluate(net, labeled_set: Sequence[SliceSample], **kw) -> DiceReport:
    if not labeled_set:
        raise ValueError("evaluate: empty set")
    missing = [s.sample_id for s in labeled_set if s.mask is None]
    if missing:
        raise ValueError(f"evaluate: unlabeled samples present (e.g. {missing[0]})")
    masks, _ = predict(net, labeled_set)
    return evaluate_set(list(masks), [s.mask for s in labeled_set], **kw)
