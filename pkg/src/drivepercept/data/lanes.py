"""Lane annotation geometry: center lines from edge pairs, stroke rasterization."""

from __future__ import annotations

from typing import Iterable, Sequence

import cv2
import numpy as np


def _as_polyline(points) -> np.ndarray:
    arr = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    if len(arr) < 2:
        raise ValueError("a polyline needs at least 2 points")
    return arr


def resample(points, n: int) -> np.ndarray:
    """Resample a polyline to ``n`` points equally spaced in arclength."""
    pts = _as_polyline(points)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total <= 0:
        raise ValueError("degenerate polyline: all points identical")
    targets = np.linspace(0.0, total, n)
    x = np.interp(targets, cum, pts[:, 0])
    y = np.interp(targets, cum, pts[:, 1])
    return np.stack([x, y], axis=1)


def center_lines(left, right) -> np.ndarray:
    """Midline of two lane edges.

    Both edges are resampled to ``max(len(left), len(right))`` equal-arclength
    points and averaged pointwise, so the result is symmetric in its arguments.
    Edges are expected to run in the same direction.
    """
    left, right = _as_polyline(left), _as_polyline(right)
    n = max(len(left), len(right))
    return 0.5 * (resample(left, n) + resample(right, n))


def rasterize_lanes(lines: Iterable[Sequence], width: float, size: tuple[int, int]) -> np.ndarray:
    """Binary mask of pixels whose center is within ``width / 2`` of any segment.

    ``size`` is ``(W, H)``; pixel ``(i, j)`` has its center at ``(j + 0.5, i + 0.5)``.
    """
    if width < 1:
        raise ValueError("lane width must be >= 1")
    W, H = size
    mask = np.zeros((H, W), dtype=np.uint8)
    r = width / 2.0
    for line in lines:
        pts = _as_polyline(line)
        for (ax, ay), (bx, by) in zip(pts[:-1], pts[1:]):
            x0 = max(int(np.floor(min(ax, bx) - r - 1)), 0)
            x1 = min(int(np.ceil(max(ax, bx) + r + 1)), W)
            y0 = max(int(np.floor(min(ay, by) - r - 1)), 0)
            y1 = min(int(np.ceil(max(ay, by) + r + 1)), H)
            if x0 >= x1 or y0 >= y1:
                continue
            px = np.arange(x0, x1) + 0.5
            py = np.arange(y0, y1)[:, None] + 0.5
            dx, dy = bx - ax, by - ay
            len2 = dx * dx + dy * dy
            if len2 > 0:
                t = np.clip(((px - ax) * dx + (py - ay) * dy) / len2, 0.0, 1.0)
            else:
                t = np.zeros((y1 - y0, x1 - x0))
            d2 = (px - (ax + t * dx)) ** 2 + (py - (ay + t * dy)) ** 2
            mask[y0:y1, x0:x1] |= (d2 <= r * r).astype(np.uint8)
    return mask


def fill_polygon(mask: np.ndarray, poly) -> None:
    """Set pixels inside a polygon given in continuous pixel coordinates."""
    pts = np.round((np.asarray(poly, dtype=np.float64) - 0.5) * 16).astype(np.int32)
    cv2.fillPoly(mask, [pts], 1, lineType=cv2.LINE_8, shift=4)
