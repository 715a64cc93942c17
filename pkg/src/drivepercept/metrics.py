"""Evaluation metrics: Recall and mAP at IoU 0.5, drivable mIoU, lane accuracy
and IoU, and per-frame latency.

Segmentation metrics accumulate confusion counts over a whole split before
dividing.
"""

from __future__ import annotations

import math
import platform
import statistics
import time
from dataclasses import dataclass, fields

import numpy as np
import torch

from .postprocess import box_iou


@dataclass
class ConfusionCounts:
    TP: int = 0
    FP: int = 0
    FN: int = 0
    TN: int = 0

    @classmethod
    def from_masks(cls, pred, gt) -> "ConfusionCounts":
        pred = np.asarray(pred).astype(bool)
        gt = np.asarray(gt).astype(bool)
        if pred.shape != gt.shape:
            raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        return cls(tp, fp, fn, int(gt.size) - tp - fp - fn)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.TP + other.TP, self.FP + other.FP, self.FN + other.FN, self.TN + other.TN)

    @property
    def total(self) -> int:
        return self.TP + self.FP + self.FN + self.TN


@dataclass
class Matches:
    """Per-prediction labels of one image, in prediction order."""

    tp: np.ndarray
    scores: np.ndarray
    classes: np.ndarray
    fn: int
    n_gt: int


def match_detections(preds: np.ndarray, gt_boxes, gt_classes=None, iou_thr: float = 0.5) -> Matches:
    """Greedy one-to-one matching of score-sorted predictions to ground truth.

    ``preds`` is ``(n, 6)`` with columns ``x1, y1, x2, y2, score, class``.
    Each prediction takes the unmatched same-class ground truth of highest
    IoU when that IoU reaches ``iou_thr``.
    """
    preds = np.asarray(preds, dtype=np.float64).reshape(-1, 6)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_classes = np.zeros(len(gt_boxes), np.int64) if gt_classes is None else np.asarray(gt_classes).reshape(-1)
    if len(preds) > 1 and (np.diff(preds[:, 4]) > 0).any():
        raise ValueError("predictions must be sorted by score, descending")
    ious = box_iou(preds[:, :4], gt_boxes)
    taken = np.zeros(len(gt_boxes), dtype=bool)
    tp = np.zeros(len(preds), dtype=bool)
    for i, p in enumerate(preds):
        cand = np.where(~taken & (gt_classes == int(p[5])), ious[i], -1.0)
        if len(cand) == 0:
            continue
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            taken[j] = True
            tp[i] = True
    return Matches(tp, preds[:, 4].copy(), preds[:, 5].astype(np.int64), int((~taken).sum()), len(gt_boxes))


def average_precision(tp: np.ndarray, scores: np.ndarray, n_gt: int) -> float:
    """All-point interpolated area under the precision-recall curve for one class."""
    if n_gt <= 0:
        raise ValueError("average precision is undefined without ground truth")
    if len(tp) == 0:
        return 0.0
    order = np.argsort(-np.asarray(scores), kind="stable")
    tp = np.asarray(tp, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[1.0], precision, [0.0]])
    mpre = np.flip(np.maximum.accumulate(np.flip(mpre)))
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def _pool(matches: list[Matches]):
    tp = np.concatenate([m.tp for m in matches]) if matches else np.zeros(0, bool)
    scores = np.concatenate([m.scores for m in matches]) if matches else np.zeros(0)
    classes = np.concatenate([m.classes for m in matches]) if matches else np.zeros(0, np.int64)
    return tp, scores, classes


def ap50(matches: list[Matches], gt_classes_per_image) -> float:
    """Mean over classes with ground truth of the per-class average precision."""
    gt_cls = np.concatenate([np.asarray(c, dtype=np.int64).reshape(-1) for c in gt_classes_per_image]) \
        if len(gt_classes_per_image) else np.zeros(0, np.int64)
    if len(gt_cls) == 0:
        raise ValueError("mAP is undefined for a split without ground-truth boxes")
    tp, scores, classes = _pool(matches)
    aps = []
    for c in np.unique(gt_cls):
        sel = classes == c
        aps.append(average_precision(tp[sel], scores[sel], int((gt_cls == c).sum())))
    return float(np.mean(aps))


def recall50(matches: list[Matches]) -> float:
    """TP / (TP + FN) over the split."""
    n_gt = sum(m.n_gt for m in matches)
    if n_gt == 0:
        raise ValueError("recall is undefined for a split without ground-truth boxes")
    return float(sum(int(m.tp.sum()) for m in matches) / n_gt)


def pr_curve(matches: list[Matches], n_gt: int) -> tuple[np.ndarray, np.ndarray]:
    """Pooled (recall, precision) points in score order."""
    tp, scores, _ = _pool(matches)
    order = np.argsort(-scores, kind="stable")
    ctp = np.cumsum(tp[order])
    k = np.arange(1, len(order) + 1)
    return ctp / max(n_gt, 1), ctp / k


def iou_of(c: ConfusionCounts) -> float:
    return c.TP / (c.TP + c.FP + c.FN)


def miou(fg: ConfusionCounts) -> float:
    """Mean IoU of background and foreground from foreground confusion counts.

    A class absent from both prediction and ground truth is left out.
    """
    bg = ConfusionCounts(fg.TN, fg.FN, fg.FP, fg.TP)
    vals = [iou_of(c) for c in (bg, fg) if c.TP + c.FP + c.FN > 0]
    if not vals:
        raise ValueError("mIoU is undefined for an empty split")
    return float(np.mean(vals))


def lane_metrics(c: ConfusionCounts) -> tuple[float, float]:
    """Lane-pixel accuracy ``TP / (TP + FN)`` and lane IoU ``TP / (TP + FP + FN)``."""
    if c.TP + c.FN == 0:
        raise ValueError("lane metrics are undefined without ground-truth lane pixels")
    return c.TP / (c.TP + c.FN), c.TP / (c.TP + c.FP + c.FN)


@dataclass
class MetricsReport:
    recall: float
    map50: float
    da_miou: float
    ll_accuracy: float
    ll_iou: float
    ms_per_frame: float
    fps: float

    def __post_init__(self) -> None:
        for f in ("recall", "map50", "da_miou", "ll_accuracy", "ll_iou"):
            v = getattr(self, f)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{f}={v} outside [0, 1]")

    def to_text(self) -> str:
        return "".join(f"{f.name}: {getattr(self, f.name)!r}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        vals = {}
        for line in text.splitlines():
            if line.strip():
                k, v = line.split(":", 1)
                vals[k.strip()] = float(v)
        return cls(**vals)

    def table(self) -> str:
        rows = [
            ("Recall(%)", self.recall * 100), ("mAP50(%)", self.map50 * 100), ("DA mIoU(%)", self.da_miou * 100),
            ("Lane Accuracy(%)", self.ll_accuracy * 100), ("Lane IoU(%)", self.ll_iou * 100),
            ("ms/frame", self.ms_per_frame), ("FPS", self.fps),
        ]
        width = max(len(r[0]) for r in rows)
        return "\n".join(f"{name:<{width}}  {value:8.2f}" for name, value in rows)


def hardware_descriptor() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} | torch {torch.__version__} | threads {torch.get_num_threads()}"


def benchmark(model, n_frames: int, image_size: tuple[int, int], warmup: int = 10, post=None) -> tuple[float, float]:
    """Median wall time per frame (ms) of forward plus ``post`` at batch 1, and FPS."""
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    W, H = image_size
    model.eval()
    x = torch.rand(1, 3, H, W, generator=torch.Generator().manual_seed(0))
    times = []
    with torch.inference_mode():
        for i in range(warmup + n_frames):
            t0 = time.perf_counter()
            raw = model(x)
            if post is not None:
                post(raw)
            dt = time.perf_counter() - t0
            if i >= warmup:
                times.append(dt * 1000.0)
    ms = float(statistics.median(times))
    return ms, 1000.0 / ms
