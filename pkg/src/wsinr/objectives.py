"""Training losses and evaluation metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError
from .numerics import Tensor, make_result, note_branch

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6


@dataclass
class LossValue:
    total: Tensor
    components: dict[str, float] = field(default_factory=dict)

    @property
    def value(self) -> float:
        return self.total.item()

    def __add__(self, other: "LossValue") -> "LossValue":
        from .numerics import add

        return LossValue(add(self.total, other.total), {**self.components, **other.components})


def _check_binary(labels: np.ndarray) -> np.ndarray:
    labels = np.asarray(labels)
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be binary (0/1)")
    return labels.astype(np.float64)


def mse_loss(pred: Tensor, target: np.ndarray) -> LossValue:
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {target.shape}")
    diff = pred.data - target
    n = diff.size
    value = np.array(np.mean(diff * diff))
    out = make_result(value, (pred,), lambda g, needs: (2.0 * float(g) * diff / n,), "mse")
    return LossValue(out, {"mse": float(value)})


def bce_loss(pred: Tensor, labels: np.ndarray) -> LossValue:
    """Two-class cross-entropy on ``H x W x 2`` probabilities; channel 1 = lesion."""
    y = _check_binary(labels)
    if pred.shape != y.shape + (2,):
        raise ShapeError(f"bce: prediction {pred.shape} vs labels {y.shape}")
    lab = y.astype(np.int64)
    p = np.take_along_axis(pred.data, lab[..., None], axis=-1)[..., 0]
    inside = (p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP)
    note_branch(inside)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    n = p.size
    value = np.array(-np.mean(np.log(pc)))

    def backward(g, needs):
        gp = np.zeros(pred.shape)
        local = np.where(inside, -1.0 / (n * pc), 0.0) * float(g)
        np.put_along_axis(gp, lab[..., None], local[..., None], axis=-1)
        return (gp,)

    out = make_result(value, (pred,), backward, "bce")
    return LossValue(out, {"bce": float(value)})


def dice_coefficient(p: np.ndarray, g: np.ndarray, squared: bool = False) -> float:
    inter = float(np.sum(p * g))
    denom = float(np.sum(p * p) + np.sum(g * g)) if squared else float(np.sum(p) + np.sum(g))
    return (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)


def dice_loss(pred: Tensor, labels: np.ndarray, squared: bool = False) -> LossValue:
    """Soft Dice loss on an ``H x W`` lesion-probability map.

    ``squared`` switches the denominator to sum(p^2) + sum(g^2).
    """
    gt = _check_binary(labels)
    if pred.shape != gt.shape:
        raise ShapeError(f"dice: prediction {pred.shape} vs labels {gt.shape}")
    p = pred.data
    inter = float(np.sum(p * gt))
    denom = float(np.sum(p * p) + np.sum(gt * gt)) if squared else float(np.sum(p) + np.sum(gt))
    coef = (2.0 * inter + DICE_EPS) / (denom + DICE_EPS)

    def backward(g, needs):
        ddenom = 2.0 * p if squared else 1.0
        dcoef = 2.0 * gt / (denom + DICE_EPS) - coef * ddenom / (denom + DICE_EPS)
        return (-float(g) * dcoef,)

    value = 1.0 - coef
    out = make_result(np.array(value), (pred,), backward, "dice_loss")
    return LossValue(out, {"dice": value})


@dataclass
class DiceReport:
    dice: float
    tp: int
    fp: int
    fn: int
    level: str = ""


def dice_metric(pred_mask: np.ndarray, truth: np.ndarray, level: str = "") -> DiceReport:
    a = np.asarray(pred_mask).astype(bool)
    b = np.asarray(truth).astype(bool)
    if a.shape != b.shape:
        raise ShapeError(f"dice: mask {a.shape} vs truth {b.shape}")
    tp = int(np.sum(a & b))
    fp = int(np.sum(a & ~b))
    fn = int(np.sum(~a & b))
    denom = 2 * tp + fp + fn
    return DiceReport(1.0 if denom == 0 else 2.0 * tp / denom, tp, fp, fn, level)


def psnr(pred: np.ndarray, target: np.ndarray) -> float:
    """Peak signal-to-noise ratio for [0, 1] images; ``inf`` when identical."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeError(f"psnr: {pred.shape} vs {target.shape}")
    mse = float(np.mean((pred - target) ** 2))
    return math.inf if mse == 0.0 else 10.0 * math.log10(1.0 / mse)
