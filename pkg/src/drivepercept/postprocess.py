"""Detection decoding, NMS and segmentation masks.

``decode_boxes`` is the single definition of the box parameterization; the
detection loss decodes its predictions through it as well.
"""

from __future__ import annotations

import numpy as np
import torch

from .anchors import AnchorSet


def decode_boxes(t: torch.Tensor, cell_xy: torch.Tensor, anchor_wh: torch.Tensor, stride: int) -> torch.Tensor:
    """Map raw ``tx, ty, tw, th`` to ``cx, cy, w, h`` in pixels.

    ``cx = (2 sigmoid(tx) - 0.5 + cell_x) * stride`` and
    ``w = anchor_w * (2 sigmoid(tw))**2``, so sizes stay below 4x the anchor.
    """
    s = t[..., :4].sigmoid()
    xy = (2.0 * s[..., :2] - 0.5 + cell_xy) * stride
    wh = anchor_wh * (2.0 * s[..., 2:4]) ** 2
    return torch.cat([xy, wh], dim=-1)


def cxcywh_to_xyxy(b):
    half = b[..., 2:4] / 2
    if isinstance(b, torch.Tensor):
        return torch.cat([b[..., :2] - half, b[..., :2] + half], dim=-1)
    return np.concatenate([b[..., :2] - half, b[..., :2] + half], axis=-1)


def _cell_grid(gh: int, gw: int) -> torch.Tensor:
    yv, xv = torch.meshgrid(torch.arange(gh), torch.arange(gw), indexing="ij")
    return torch.stack([xv, yv], dim=-1).float()


def decode(grid: torch.Tensor, anchors_s, stride: int, image_size: tuple[int, int] | None = None,
           conf_thr: float = 0.0) -> list[np.ndarray]:
    """Decode one detection grid into per-image ``(n, 6)`` arrays.

    ``grid`` is ``N x 3 x gh x gw x (5 + nc)``; ``anchors_s`` the three (w, h)
    anchors for this stride. Columns are ``x1, y1, x2, y2, score, class``.
    Boxes are clipped to ``image_size = (W, H)``, which defaults to the grid
    extent. With one class the score is the objectness alone.
    """
    grid = grid.detach().float()
    N, na, gh, gw, no = grid.shape
    nc = no - 5
    W, H = image_size if image_size is not None else (gw * stride, gh * stride)
    aw = torch.as_tensor(np.asarray(anchors_s, dtype=np.float32)).view(1, na, 1, 1, 2)
    cxcywh = decode_boxes(grid, _cell_grid(gh, gw).view(1, 1, gh, gw, 2), aw, stride)
    xyxy = cxcywh_to_xyxy(cxcywh)
    xyxy[..., 0::2] = xyxy[..., 0::2].clamp(0, W)
    xyxy[..., 1::2] = xyxy[..., 1::2].clamp(0, H)
    obj = grid[..., 4].sigmoid()
    if nc == 1:
        score, cls = obj, torch.zeros_like(obj)
    else:
        cls_p, cls = grid[..., 5:].sigmoid().max(dim=-1)
        score, cls = obj * cls_p, cls.float()
    out = torch.cat([xyxy, score[..., None], cls[..., None]], dim=-1).view(N, -1, 6).numpy().astype(np.float64)
    res = []
    for d in out:
        keep = (d[:, 4] >= conf_thr) & (d[:, 2] > d[:, 0]) & (d[:, 3] > d[:, 1])
        res.append(d[keep])
    return res


def decode_all(det_grids, anchors: AnchorSet, strides=(8, 16, 32), image_size=None, conf_thr: float = 0.0):
    per_stride = anchors.per_stride(strides)
    parts = [decode(g, per_stride[s], s, image_size, conf_thr) for g, s in zip(det_grids, strides)]
    return [np.concatenate([p[i] for p in parts], axis=0) for i in range(len(parts[0]))]


def box_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of ``(n, 4)`` and ``(m, 4)`` corner boxes."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)


def _score_order(dets: np.ndarray) -> np.ndarray:
    area = (dets[:, 2] - dets[:, 0]) * (dets[:, 3] - dets[:, 1])
    # lexsort: last key is primary. Score descending, then smaller area, then input order.
    return np.lexsort((np.arange(len(dets)), area, -dets[:, 4]))


def nms(dets: np.ndarray, iou_thr: float = 0.45, conf_thr: float = 0.25, max_det: int | None = None) -> np.ndarray:
    """Greedy per-class NMS on ``(n, 6)`` detections.

    Detections under ``conf_thr`` are dropped first. Output is sorted by score
    descending, ties broken by smaller area and then input order.
    """
    dets = np.asarray(dets, dtype=np.float64).reshape(-1, 6)
    dets = dets[dets[:, 4] >= conf_thr]
    if not len(dets):
        return dets
    dets = dets[_score_order(dets)]
    keep = np.ones(len(dets), dtype=bool)
    for c in np.unique(dets[:, 5]):
        idx = np.flatnonzero(dets[:, 5] == c)
        ious = box_iou(dets[idx, :4], dets[idx, :4])
        alive = np.ones(len(idx), dtype=bool)
        for i in range(len(idx)):
            if not alive[i]:
                continue
            alive[i + 1:] &= ~(ious[i, i + 1:] > iou_thr)
        keep[idx] = alive
    out = dets[keep]
    return out[:max_det] if max_det is not None else out


def seg_to_mask(logits) -> np.ndarray:
    """Per-pixel argmax of ``N x 2 x H x W`` logits; ties go to background."""
    if isinstance(logits, torch.Tensor):
        logits = logits.detach().cpu().numpy()
    return (logits[:, 1] > logits[:, 0]).astype(np.uint8)


def postprocess(raw, anchors: AnchorSet, image_size, conf_thr: float, iou_thr: float,
                strides=(8, 16, 32), max_det: int = 300, pre_nms_top: int = 3000):
    """Detections after NMS plus drivable and lane masks for every image."""
    dets = []
    if raw.det is not None:
        for d in decode_all(raw.det, anchors, strides, image_size, conf_thr):
            if len(d) > pre_nms_top:
                d = d[np.argsort(-d[:, 4], kind="stable")[:pre_nms_top]]
            dets.append(nms(d, iou_thr, conf_thr, max_det))
    da = seg_to_mask(raw.da_logits) if raw.da_logits is not None else None
    ll = seg_to_mask(raw.ll_logits) if raw.ll_logits is not None else None
    return dets, da, ll
