"""Multi-task loss.

``L_det = a1 * L_class + a2 * L_obj + a3 * L_box``,
``L_ll_seg = CE + soft-IoU``, ``L_da_seg = CE`` and
``L_all = g1 * L_det + g2 * L_da_seg + g3 * L_ll_seg``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from .anchors import AnchorSet
from .config import LossWeights
from .postprocess import cxcywh_to_xyxy, decode_boxes

LOG_EPS = math.log(1e-12)


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    """Mean sigmoid focal loss ``-alpha_t (1 - p_t)**gamma log p_t``.

    ``alpha_t`` is ``alpha`` for positive targets and ``1 - alpha`` otherwise.
    ``log p_t`` comes from ``logsigmoid`` and is floored at ``log(1e-12)``.
    """
    targets = targets.to(logits.dtype)
    if logits.numel() == 0:
        return logits.sum() * 0.0
    signed = torch.where(targets > 0.5, logits, -logits)
    log_pt = F.logsigmoid(signed).clamp(min=LOG_EPS)
    pt = log_pt.exp()
    alpha_t = torch.where(targets > 0.5, torch.full_like(pt, alpha), torch.full_like(pt, 1.0 - alpha))
    return (-alpha_t * (1.0 - pt) ** gamma * log_pt).mean()


def _box_terms(pred: torch.Tensor, gt: torch.Tensor, eps: float = 1e-9):
    px1, py1, px2, py2 = pred.unbind(-1)
    gx1, gy1, gx2, gy2 = gt.unbind(-1)
    pw, ph = px2 - px1, py2 - py1
    gw, gh = gx2 - gx1, gy2 - gy1
    iw = (torch.min(px2, gx2) - torch.max(px1, gx1)).clamp(min=0)
    ih = (torch.min(py2, gy2) - torch.max(py1, gy1)).clamp(min=0)
    inter = iw * ih
    union = pw * ph + gw * gh - inter + eps
    iou = inter / union
    cw = torch.max(px2, gx2) - torch.min(px1, gx1)
    ch = torch.max(py2, gy2) - torch.min(py1, gy1)
    c2 = cw ** 2 + ch ** 2 + eps
    rho2 = ((px1 + px2 - gx1 - gx2) ** 2 + (py1 + py2 - gy1 - gy2) ** 2) / 4
    v = (4 / math.pi ** 2) * (torch.atan(gw / (gh + eps)) - torch.atan(pw / (ph + eps))) ** 2
    return iou, rho2, c2, v


def ciou_loss(pred: torch.Tensor, gt: torch.Tensor, reduction: str = "mean", detach_alpha: bool = True,
              check: bool = True) -> torch.Tensor:
    """``1 - CIoU`` for corner boxes ``(..., 4)``.

    ``CIoU = IoU - rho^2 / c^2 - alpha * v``; the trade-off ``alpha`` is held
    constant for gradients unless ``detach_alpha`` is False.
    """
    pred = torch.as_tensor(pred, dtype=torch.float64) if not isinstance(pred, torch.Tensor) else pred
    gt = torch.as_tensor(gt, dtype=pred.dtype) if not isinstance(gt, torch.Tensor) else gt.to(pred.dtype)
    if check:
        for b in (pred, gt):
            if ((b[..., 2] <= b[..., 0]) | (b[..., 3] <= b[..., 1])).any():
                raise ValueError("degenerate box in ciou_loss")
    iou, rho2, c2, v = _box_terms(pred, gt)
    alpha = v / ((1 - iou) + v + 1e-9)
    if detach_alpha:
        alpha = alpha.detach()
    loss = 1 - (iou - rho2 / c2 - alpha * v)
    if reduction == "none":
        return loss
    if reduction == "sum":
        return loss.sum()
    return loss.mean() if loss.numel() else loss.sum()


def seg_ce_loss(logits: torch.Tensor, mask) -> torch.Tensor:
    """Mean per-pixel two-class cross-entropy from logits."""
    mask = torch.as_tensor(mask).long()
    if logits.ndim != 4 or logits.shape[1] != 2 or tuple(mask.shape) != (logits.shape[0], *logits.shape[2:]):
        raise ValueError(f"logits {tuple(logits.shape)} do not match mask {tuple(mask.shape)}")
    return F.cross_entropy(logits, mask)


def soft_iou_loss(probs: torch.Tensor, mask) -> torch.Tensor:
    """``1 - TP / (TP + FP + FN)`` with soft counts summed over the batch."""
    y = torch.as_tensor(mask).to(probs.dtype)
    if probs.shape != y.shape:
        raise ValueError(f"probs {tuple(probs.shape)} do not match mask {tuple(y.shape)}")
    tp = (probs * y).sum()
    fp = (probs * (1 - y)).sum()
    fn = ((1 - probs) * y).sum()
    return 1 - tp / (tp + fp + fn).clamp(min=1e-7)


@dataclass
class AssignedTargets:
    """Positives per detection scale.

    ``indices[i]`` is a ``(P, 4)`` long tensor of ``(image, anchor, cell_y,
    cell_x)``; ``boxes[i]`` the matched ``(P, 4)`` corner boxes in pixels;
    ``classes[i]`` their class ids; ``obj[i]`` the ``N x 3 x gh x gw``
    objectness target. ``unmatched`` lists ``(image, box index)`` of ground
    truths that matched no anchor at any scale.
    """

    indices: list[torch.Tensor]
    boxes: list[torch.Tensor]
    classes: list[torch.Tensor]
    obj: list[torch.Tensor]
    unmatched: list[tuple[int, int]]

    @property
    def num_positives(self) -> int:
        return sum(len(i) for i in self.indices)


def assign_targets(boxes_per_image, classes_per_image, anchors: AnchorSet, grid_shapes,
                   strides=(8, 16, 32), ratio: float = 4.0) -> AssignedTargets:
    """Assign each ground truth to every anchor whose side ratios are below ``ratio``.

    A match at stride ``s`` is placed at the cell containing the box center.
    ``grid_shapes`` lists ``(gh, gw)`` per stride.
    """
    per_stride = anchors.per_stride(strides)
    N = len(boxes_per_image)
    indices, mboxes, mcls, objs = [], [], [], []
    matched_any: set[tuple[int, int]] = set()
    for s, (gh, gw) in zip(strides, grid_shapes):
        aw = per_stride[s]
        idx, bx, cl = [], [], []
        obj = torch.zeros(N, len(aw), gh, gw)
        for n, (b, c) in enumerate(zip(boxes_per_image, classes_per_image)):
            b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
            if not len(b):
                continue
            wh = b[:, 2:] - b[:, :2]
            ctr = (b[:, :2] + b[:, 2:]) / 2
            r = wh[:, None, :] / aw[None, :, :]
            worst = np.maximum(r, 1 / r).max(axis=2)  # boxes x anchors
            gx = np.clip(np.floor(ctr[:, 0] / s), 0, gw - 1).astype(np.int64)
            gy = np.clip(np.floor(ctr[:, 1] / s), 0, gh - 1).astype(np.int64)
            for j, a in zip(*np.nonzero(worst < ratio)):
                idx.append((n, a, gy[j], gx[j]))
                bx.append(b[j])
                cl.append(int(np.asarray(c)[j]))
                obj[n, a, gy[j], gx[j]] = 1.0
                matched_any.add((n, int(j)))
        indices.append(torch.tensor(idx, dtype=torch.long).view(-1, 4))
        mboxes.append(torch.tensor(np.array(bx), dtype=torch.float32).view(-1, 4))
        mcls.append(torch.tensor(cl, dtype=torch.long))
        objs.append(obj)
    unmatched = [
        (n, j) for n, b in enumerate(boxes_per_image)
        for j in range(len(np.asarray(b).reshape(-1, 4))) if (n, j) not in matched_any
    ]
    return AssignedTargets(indices, mboxes, mcls, objs, unmatched)


def detection_loss(det_grids, targets: AssignedTargets, w: LossWeights, anchors: AnchorSet,
                   strides=(8, 16, 32), detach_alpha: bool = True):
    """Unweighted ``(L_class, L_obj, L_box)``.

    ``L_box`` averages ``1 - CIoU`` over all positives with boxes decoded by
    :func:`decode_boxes`; ``L_obj`` is the focal loss over every cell of every
    scale; ``L_class`` is the focal loss over positives and is zero when there
    is a single class.
    """
    per_stride = anchors.per_stride(strides)
    device = det_grids[0].device
    dtype = det_grids[0].dtype
    nc = det_grids[0].shape[-1] - 5
    box_losses, cls_logits, cls_targets = [], [], []
    obj_logits, obj_targets = [], []
    for grid, s, idx, gtb, gtc, tobj in zip(det_grids, strides, targets.indices, targets.boxes,
                                            targets.classes, targets.obj):
        obj_logits.append(grid[..., 4].reshape(-1))
        obj_targets.append(tobj.to(device=device, dtype=dtype).reshape(-1))
        if not len(idx):
            continue
        b, a, gy, gx = idx.unbind(1)
        p = grid[b, a, gy, gx]
        cell = torch.stack([gx, gy], dim=1).to(dtype)
        anc = torch.as_tensor(per_stride[s], dtype=dtype, device=device)[a]
        pbox = cxcywh_to_xyxy(decode_boxes(p, cell, anc, s))
        box_losses.append(ciou_loss(pbox, gtb.to(device=device, dtype=dtype), reduction="none",
                                    detach_alpha=detach_alpha, check=False))
        if nc > 1:
            cls_logits.append(p[:, 5:])
            cls_targets.append(F.one_hot(gtc.to(device), nc).to(dtype))
    zero = det_grids[0].sum() * 0.0
    l_obj = focal_loss(torch.cat(obj_logits), torch.cat(obj_targets), w.focal_gamma, w.focal_alpha)
    l_box = torch.cat(box_losses).mean() if box_losses else zero
    if nc > 1 and cls_logits:
        l_cls = focal_loss(torch.cat(cls_logits), torch.cat(cls_targets), w.focal_gamma, w.focal_alpha)
    else:
        l_cls = zero
    return l_cls, l_obj, l_box


@dataclass
class LossBreakdown:
    L_class: torch.Tensor
    L_obj: torch.Tensor
    L_box: torch.Tensor
    L_det: torch.Tensor
    L_da_seg: torch.Tensor
    L_ll_seg_ce: torch.Tensor
    L_ll_iou: torch.Tensor
    L_ll_seg: torch.Tensor
    L_all: torch.Tensor

    def as_floats(self) -> dict[str, float]:
        return {f.name: float(getattr(self, f.name).detach()) for f in fields(self)}

    def check(self, w: LossWeights, rel: float = 1e-6) -> None:
        """Assert the weighted-sum identities between the terms."""
        v = self.as_floats()
        for name, lhs, rhs in (
            ("L_det", v["L_det"], w.alpha1 * v["L_class"] + w.alpha2 * v["L_obj"] + w.alpha3 * v["L_box"]),
            ("L_ll_seg", v["L_ll_seg"], v["L_ll_seg_ce"] + v["L_ll_iou"]),
            ("L_all", v["L_all"], w.gamma1 * v["L_det"] + w.gamma2 * v["L_da_seg"] + w.gamma3 * v["L_ll_seg"]),
        ):
            if not math.isclose(lhs, rhs, rel_tol=rel, abs_tol=1e-12):
                raise AssertionError(f"{name} identity violated: {lhs} != {rhs}")


def total_loss(raw, targets: AssignedTargets | None, da_mask, ll_mask, w: LossWeights, anchors: AnchorSet,
               active_heads=("det", "da", "ll"), strides=(8, 16, 32)) -> LossBreakdown:
    """Weighted multi-task loss; inactive heads contribute a constant zero."""
    ref = next(t for t in ([*(raw.det or [])] + [raw.da_logits, raw.ll_logits]) if t is not None)
    zero = torch.zeros((), dtype=ref.dtype, device=ref.device)
    l_cls = l_obj = l_box = zero
    if "det" in active_heads:
        l_cls, l_obj, l_box = detection_loss(raw.det, targets, w, anchors, strides)
    l_da = seg_ce_loss(raw.da_logits, da_mask) if "da" in active_heads else zero
    if "ll" in active_heads:
        l_ll_ce = seg_ce_loss(raw.ll_logits, ll_mask)
        l_ll_iou = soft_iou_loss(raw.ll_logits.softmax(dim=1)[:, 1], ll_mask)
    else:
        l_ll_ce = l_ll_iou = zero
    l_det = w.alpha1 * l_cls + w.alpha2 * l_obj + w.alpha3 * l_box
    l_ll = l_ll_ce + l_ll_iou
    l_all = w.gamma1 * l_det + w.gamma2 * l_da + w.gamma3 * l_ll
    return LossBreakdown(l_cls, l_obj, l_box, l_det, l_da, l_ll_ce, l_ll_iou, l_ll, l_all)
