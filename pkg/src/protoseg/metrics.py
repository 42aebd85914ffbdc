"""Segmentation quality and group-token diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class SegEval:
    iou: np.ndarray  # (K+1,), NaN where a class is absent from both pred and gt
    miou: float

    def to_dict(self) -> dict:
        return {"miou": self.miou,
                "per_class_iou": [None if np.isnan(x) else float(x) for x in self.iou]}


def confusion(pred, gt, num_classes: int) -> np.ndarray:
    """(K+1, K+1) counts, rows gt, columns pred."""
    pred = np.asarray(pred).ravel().astype(np.int64)
    gt = np.asarray(gt).ravel().astype(np.int64)
    if pred.shape != gt.shape:
        raise ValueError("pred and gt differ in size")
    for name, arr in (("pred", pred), ("gt", gt)):
        if arr.size and (arr.min() < 0 or arr.max() > num_classes):
            raise ValueError(f"{name} label out of range 0..{num_classes}")
    k = num_classes + 1
    return np.bincount(gt * k + pred, minlength=k * k).reshape(k, k)


def miou(pred, gt, num_classes: int) -> SegEval:
    """Per-class IoU; the mean runs over classes present in gt."""
    cm = confusion(pred, gt, num_classes)
    inter = np.diag(cm).astype(np.float64)
    union = cm.sum(0) + cm.sum(1) - np.diag(cm)
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / np.maximum(union, 1), np.nan)
    present = cm.sum(1) > 0
    mean = float(np.mean(iou[present])) if present.any() else float("nan")
    return SegEval(iou, mean)


def compactness(tokens, assign, groups) -> float:
    """Mean (1 - cosine) between each token and the group it is assigned to.

    ``tokens`` (..., m, d), ``assign`` hard (..., q, m), ``groups`` (..., q, d).
    Lower means tighter clusters.  Groups with no tokens do not contribute.
    """
    s = np.asarray(tokens, dtype=np.float64)
    a = np.asarray(assign, dtype=np.float64)
    g = np.asarray(groups, dtype=np.float64)
    idx = a.argmax(axis=-2)  # (..., m)
    mine = np.take_along_axis(g, idx[..., None], axis=-2)
    cos = (s * mine).sum(-1) / (np.linalg.norm(s, axis=-1) * np.linalg.norm(mine, axis=-1))
    return float(np.mean(1.0 - cos))


def dim_variance(group_batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and population variance across samples.

    ``group_batch`` is (n, q, d) or (n, d) with n >= 2.  Statistics are taken
    over the sample axis for each group slot and then averaged over slots, so
    a batch of identical samples has zero variance.
    """
    g = np.asarray(group_batch, dtype=np.float64)
    if g.ndim < 2 or g.shape[0] < 2:
        raise ValueError("dim_variance needs at least 2 samples")
    g = g.reshape(g.shape[0], -1, g.shape[-1])
    return g.mean(axis=0).mean(axis=0), g.var(axis=0).mean(axis=0)
