"""Resizing and augmentation applied consistently to images, boxes and masks.

Coordinates are continuous: pixel column ``j`` spans ``[j, j + 1)``. OpenCV
samples at integer pixel indices, so affine matrices are built in continuous
coordinates and converted with :func:`_to_index_affine` before warping.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass, replace

import cv2
import numpy as np

from .types import Sample

MIN_BOX_AREA = 4.0
BORDER_VALUE = 114.0 / 255.0

# Jitter ranges: hue shift as a fraction of the hue circle, multiplicative
# saturation/value gains, degrees, scale factor, fraction of size, degrees.
HUE = 0.015
SATURATION = (0.6, 1.4)
VALUE = (0.6, 1.4)
ROTATE = 10.0
SCALE = (0.75, 1.25)
TRANSLATE = 0.1
SHEAR = 5.0
FLIP_P = 0.5


def resize_sample(s: Sample, target: tuple[int, int]) -> Sample:
    """Resize to ``target = (W, H)`` without letterboxing."""
    W, H = s.size
    tw, th = target
    if (tw, th) == (W, H):
        return replace(s, lanes=None if s.lanes is None else [l.copy() for l in s.lanes])
    sx, sy = tw / W, th / H
    image = cv2.resize(s.image.astype(np.float32), (tw, th), interpolation=cv2.INTER_LINEAR)
    da = cv2.resize(s.da_mask, (tw, th), interpolation=cv2.INTER_NEAREST_EXACT)
    ll = cv2.resize(s.ll_mask, (tw, th), interpolation=cv2.INTER_NEAREST_EXACT)
    boxes = s.boxes * np.array([sx, sy, sx, sy])
    lanes = None if s.lanes is None else [l * np.array([sx, sy]) for l in s.lanes]
    return Sample(np.clip(image, 0.0, 1.0), boxes, s.classes.copy(), da, ll, s.id, lanes)


@dataclass(frozen=True)
class AugmentParams:
    hue: float = 0.0
    saturation: float = 1.0
    value: float = 1.0
    rotate: float = 0.0
    scale: float = 1.0
    translate: tuple[float, float] = (0.0, 0.0)
    shear: tuple[float, float] = (0.0, 0.0)
    flip: bool = False

    @property
    def is_geometric_identity(self) -> bool:
        return (self.rotate == 0 and self.scale == 1 and self.translate == (0.0, 0.0)
                and self.shear == (0.0, 0.0))


def sample_rng(seed: int, sample_id: str, epoch: int = 0) -> np.random.Generator:
    """Per-sample generator derived from the run seed, the sample id and the epoch."""
    return np.random.default_rng([seed, zlib.crc32(sample_id.encode()), epoch])


def draw_params(rng: np.random.Generator) -> AugmentParams:
    return AugmentParams(
        hue=float(rng.uniform(-HUE, HUE)),
        saturation=float(rng.uniform(*SATURATION)),
        value=float(rng.uniform(*VALUE)),
        rotate=float(rng.uniform(-ROTATE, ROTATE)),
        scale=float(rng.uniform(*SCALE)),
        translate=(float(rng.uniform(-TRANSLATE, TRANSLATE)), float(rng.uniform(-TRANSLATE, TRANSLATE))),
        shear=(float(rng.uniform(-SHEAR, SHEAR)), float(rng.uniform(-SHEAR, SHEAR))),
        flip=bool(rng.random() < FLIP_P),
    )


def affine_matrix(p: AugmentParams, size: tuple[int, int]) -> np.ndarray:
    """3x3 continuous-coordinate affine: rotate/scale/shear about the center, then translate."""
    W, H = size
    C = np.array([[1, 0, -W / 2], [0, 1, -H / 2], [0, 0, 1]], dtype=np.float64)
    a = np.deg2rad(p.rotate)
    R = np.array([[np.cos(a), -np.sin(a), 0], [np.sin(a), np.cos(a), 0], [0, 0, 1]]) * np.array(
        [[p.scale], [p.scale], [1]]
    )
    S = np.array([[1, np.tan(np.deg2rad(p.shear[0])), 0], [np.tan(np.deg2rad(p.shear[1])), 1, 0], [0, 0, 1]])
    T = np.array([[1, 0, W / 2 + p.translate[0] * W], [0, 1, H / 2 + p.translate[1] * H], [0, 0, 1]])
    return T @ S @ R @ C


def _to_index_affine(M: np.ndarray) -> np.ndarray:
    # i' + 0.5 = A (i + 0.5) + t  =>  i' = A i + (A @ 0.5 + t - 0.5)
    A, t = M[:2, :2], M[:2, 2]
    return np.hstack([A, (A @ np.array([0.5, 0.5]) + t - 0.5)[:, None]])


def _warp_boxes(boxes: np.ndarray, M: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    if not len(boxes):
        return boxes.reshape(0, 4), np.zeros(0, dtype=bool)
    W, H = size
    x1, y1, x2, y2 = boxes.T
    corners = np.stack([
        np.stack([x1, y1], 1), np.stack([x2, y1], 1), np.stack([x1, y2], 1), np.stack([x2, y2], 1)
    ], axis=1)  # n, 4, 2
    warped = corners @ M[:2, :2].T + M[:2, 2]
    out = np.concatenate([warped.min(axis=1), warped.max(axis=1)], axis=1)
    out[:, [0, 2]] = out[:, [0, 2]].clip(0, W)
    out[:, [1, 3]] = out[:, [1, 3]].clip(0, H)
    area = (out[:, 2] - out[:, 0]) * (out[:, 3] - out[:, 1])
    keep = (out[:, 2] > out[:, 0]) & (out[:, 3] > out[:, 1]) & (area >= MIN_BOX_AREA)
    return out, keep


def _hsv_jitter(image: np.ndarray, p: AugmentParams) -> np.ndarray:
    if p.hue == 0 and p.saturation == 1 and p.value == 1:
        return image
    hsv = cv2.cvtColor(image.astype(np.float32), cv2.COLOR_RGB2HSV)
    hsv[..., 0] = np.mod(hsv[..., 0] + p.hue * 360.0, 360.0)
    hsv[..., 1] = np.clip(hsv[..., 1] * p.saturation, 0.0, 1.0)
    hsv[..., 2] = np.clip(hsv[..., 2] * p.value, 0.0, 1.0)
    return np.clip(cv2.cvtColor(hsv, cv2.COLOR_HSV2RGB), 0.0, 1.0)


def apply_augment(s: Sample, p: AugmentParams) -> Sample:
    W, H = s.size
    image = _hsv_jitter(s.image, p)
    boxes, classes = s.boxes.copy(), s.classes.copy()
    da, ll = s.da_mask, s.ll_mask
    lanes = None if s.lanes is None else [l.copy() for l in s.lanes]
    if not p.is_geometric_identity:
        M = affine_matrix(p, (W, H))
        Mi = _to_index_affine(M)
        image = cv2.warpAffine(image.astype(np.float32), Mi, (W, H), flags=cv2.INTER_LINEAR,
                               borderMode=cv2.BORDER_CONSTANT, borderValue=(BORDER_VALUE,) * 3)
        da = cv2.warpAffine(da, Mi, (W, H), flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        ll = cv2.warpAffine(ll, Mi, (W, H), flags=cv2.INTER_NEAREST, borderMode=cv2.BORDER_CONSTANT, borderValue=0)
        boxes, keep = _warp_boxes(boxes, M, (W, H))
        boxes, classes = boxes[keep], classes[keep]
        if lanes is not None:
            lanes = [l @ M[:2, :2].T + M[:2, 2] for l in lanes]
    if p.flip:
        image = image[:, ::-1]
        da, ll = da[:, ::-1], ll[:, ::-1]
        if len(boxes):
            boxes = np.stack([W - boxes[:, 2], boxes[:, 1], W - boxes[:, 0], boxes[:, 3]], axis=1)
        if lanes is not None:
            lanes = [np.stack([W - l[:, 0], l[:, 1]], axis=1) for l in lanes]
    return Sample(np.ascontiguousarray(np.clip(image, 0.0, 1.0), dtype=np.float32), boxes, classes,
                  np.ascontiguousarray(da), np.ascontiguousarray(ll), s.id, lanes)


def augment(s: Sample, rng: np.random.Generator) -> Sample:
    """Random photometric jitter plus one affine warp and an optional flip."""
    return apply_augment(s, draw_params(rng))
