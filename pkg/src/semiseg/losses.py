"""Segmentation losses and the dice overlap metric."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CLASS_NAMES = {0: "BG", 1: "LV", 2: "MYO", 3: "RV"}
DICE_SMOOTH = 1e-5


def one_hot(masks: np.ndarray, num_classes: int, dtype=np.float64) -> np.ndarray:
    """(B, H, W) integer masks -> (B, C, H, W) one-hot."""
    masks = np.asarray(masks)
    out = np.zeros((masks.shape[0], num_classes, *masks.shape[1:]), dtype=dtype)
    np.put_along_axis(out, masks[:, None].astype(np.intp), 1.0, axis=1)
    return out


def _check_labels(target: np.ndarray, num_classes: int) -> None:
    bad = (target < 0) | (target >= num_classes)
    if bad.any():
        loc = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(
            f"label {int(target[loc])} at pixel {loc} outside [0, {num_classes - 1}]")


def categorical_cross_entropy(logits: Tensor, target: np.ndarray) -> Tensor:
    """Mean per-pixel negative log-likelihood, computed with log-sum-exp."""
    x = logits.data
    target = np.asarray(target)
    B, C, H, W = x.shape
    if target.shape != (B, H, W):
        raise ad.ShapeError(f"target shape {target.shape} != {(B, H, W)}")
    _check_labels(target, C)
    logp = ad.log_softmax_channels(x)
    idx = target[:, None].astype(np.intp)
    n = B * H * W
    loss = -np.take_along_axis(logp, idx, axis=1).sum() / n

    def _bw(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
        return (grad * (g / n),)

    return ad._make(np.asarray(loss, dtype=x.dtype), (logits,), _bw, "cross_entropy")


def soft_dice_loss(probs: Tensor, target, eps: float = DICE_SMOOTH) -> Tensor:
    """1 - mean soft dice over foreground channels (1..C-1) and the batch."""
    p = probs.data
    t = target.data if isinstance(target, Tensor) else np.asarray(target, dtype=p.dtype)
    if p.shape != t.shape or p.ndim != 4:
        raise ad.ShapeError(f"probs {p.shape} and target {t.shape} must match as (B, C, H, W)")
    dev = np.abs(p.sum(axis=1) - 1.0).max()
    if dev > 1e-6:
        raise ValueError(f"probabilities do not sum to 1 over channels (max deviation {dev:.3g})")
    B, C = p.shape[:2]
    pf, tf = p[:, 1:], t[:, 1:]
    inter = (pf * tf).sum(axis=(2, 3))
    denom = pf.sum(axis=(2, 3)) + tf.sum(axis=(2, 3)) + eps
    num = 2.0 * inter + eps
    loss = 1.0 - (num / denom).mean()
    k = B * (C - 1)

    def _bw(g):
        d = (2.0 * tf * denom[:, :, None, None] - num[:, :, None, None]) / (denom ** 2)[:, :, None, None]
        grad = np.zeros_like(p)
        grad[:, 1:] = -d * (g / k)
        return (grad,)

    return ad._make(np.asarray(loss, dtype=p.dtype), (probs,), _bw, "soft_dice")


def segmentation_loss(logits: Tensor, masks: np.ndarray, kind: str) -> Tensor:
    """Training loss: ``cross_entropy``, ``dice`` or ``sum_of_both``."""
    if kind == "cross_entropy":
        return categorical_cross_entropy(logits, masks)
    onehot = one_hot(masks, logits.shape[1], dtype=logits.dtype)
    dice = soft_dice_loss(ad.softmax_channels(logits), onehot)
    if kind == "dice":
        return dice
    if kind == "sum_of_both":
        return ad.add(categorical_cross_entropy(logits, masks), dice)
    raise ValueError(f"unknown loss {kind!r}")


# ---------------------------------------------------------------------------
# metrics


def dice_coefficient(a: np.ndarray, b: np.ndarray, class_id: int) -> float:
    """2|A∩B| / (|A|+|B|) over pixels equal to ``class_id``; 1.0 if both are empty."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ad.ShapeError(f"dice_coefficient: shape mismatch {a.shape} vs {b.shape}")
    A = a == class_id
    Bm = b == class_id
    total = int(A.sum()) + int(Bm.sum())
    if total == 0:
        return 1.0
    return 2.0 * int((A & Bm).sum()) / total


@dataclass
class DiceReport:
    per_class: dict[int, float]
    average: float
    counts: dict[int, int] = field(default_factory=dict)
    num_classes: int = 4

    def not_present(self) -> list[int]:
        return [k for k in range(1, self.num_classes) if k not in self.per_class]

    def to_dict(self) -> dict:
        return {
            "per_class": {CLASS_NAMES.get(k, str(k)): v for k, v in sorted(self.per_class.items())},
            "not_present": [CLASS_NAMES.get(k, str(k)) for k in self.not_present()],
            "average": self.average,
            "counts": {CLASS_NAMES.get(k, str(k)): v for k, v in sorted(self.counts.items())},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def csv_rows(self, scenario: str, split: str) -> list[list]:
        rows = [[scenario, split, CLASS_NAMES.get(k, str(k)), f"{v:.6f}"]
                for k, v in sorted(self.per_class.items())]
        rows.append([scenario, split, "AVG", f"{self.average:.6f}"])
        return rows

    def to_csv(self, scenario: str, split: str, header: bool = True) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(["scenario", "split", "class", "dice"])
        w.writerows(self.csv_rows(scenario, split))
        return buf.getvalue()


def _mean(values: Sequence[float]) -> float:
    # left-to-right sum, so results do not depend on numpy's pairwise blocking
    return float(sum(values) / len(values))


def evaluate_set(predictions: Sequence[np.ndarray], truths: Sequence[np.ndarray],
                 num_classes: int = 4, pooled: bool = False,
                 groups: Sequence[str] | None = None) -> DiceReport:
    """Per-class dice over a set of masks.

    By default dice is computed per sample and averaged over the samples in
    which the class appears in the ground truth.  ``pooled=True`` instead
    accumulates intersections and sizes over the whole set.  With ``groups``
    (e.g. patient ids) the per-sample scores are first averaged within each
    group, then across groups.
    """
    if len(predictions) == 0:
        raise ValueError("evaluate_set: empty prediction list")
    if len(predictions) != len(truths):
        raise ValueError(f"evaluate_set: {len(predictions)} predictions vs {len(truths)} truths")
    if groups is not None and len(groups) != len(truths):
        raise ValueError("evaluate_set: groups must align with truths")
    for p, t in zip(predictions, truths):
        if np.shape(p) != np.shape(t):
            raise ad.ShapeError(f"evaluate_set: shape mismatch {np.shape(p)} vs {np.shape(t)}")

    per_class: dict[int, float] = {}
    counts: dict[int, int] = {}
    for k in range(1, num_classes):
        present = [i for i, t in enumerate(truths) if np.any(np.asarray(t) == k)]
        if not present:
            continue
        counts[k] = len(present)
        if pooled:
            inter = size = 0
            for i in present:
                A = np.asarray(truths[i]) == k
                Bm = np.asarray(predictions[i]) == k
                inter += int((A & Bm).sum())
                size += int(A.sum()) + int(Bm.sum())
            per_class[k] = 2.0 * inter / size
        elif groups is None:
            per_class[k] = _mean([dice_coefficient(truths[i], predictions[i], k) for i in present])
        else:
            by_group: dict[str, list[float]] = {}
            for i in present:
                by_group.setdefault(groups[i], []).append(dice_coefficient(truths[i], predictions[i], k))
            per_class[k] = _mean([_mean(v) for _, v in sorted(by_group.items())])
    average = _mean(list(per_class.values())) if per_class else float("nan")
    return DiceReport(per_class=per_class, average=average, counts=counts, num_classes=num_classes)
