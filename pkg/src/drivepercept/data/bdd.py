"""Ingestion of BDD-style per-image label records.

Accepted subset of the schema::

    {"name": "<image id>",
     "labels": [
        {"category": "car", "box2d": {"x1": .., "y1": .., "x2": .., "y2": ..}},
        {"category": "area/drivable",    "poly2d": [{"vertices": [[x, y], ...]}]},
        {"category": "area/alternative", "poly2d": [{"vertices": [[x, y], ...]}]},
        {"category": "lane/single white", "poly2d": [{"vertices": [[x, y], ...]}, ...]}
     ]}

The older ``{"frames": [{"objects": [...]}]}`` wrapper with ``poly2d`` given as
``[[x, y, type], ...]`` is also read. Lane labels carrying two polylines are
treated as the two edges of one marking; single-edge lane labels are paired
greedily by mean point distance, and unpaired edges are kept as-is.
"""

from __future__ import annotations

from typing import Any, Sequence

import numpy as np

from ..config import DEFAULT_VEHICLE_CATEGORIES
from .lanes import center_lines, fill_polygon, rasterize_lanes, resample
from .types import Sample

DRIVABLE = ("area/drivable", "area/alternative")


class SchemaError(ValueError):
    pass


def _labels(record: dict) -> list[dict]:
    if not isinstance(record, dict):
        raise SchemaError("record must be a mapping")
    if "labels" in record:
        labels = record["labels"]
    elif "frames" in record:
        frames = record["frames"]
        if not isinstance(frames, list) or not frames:
            raise SchemaError("'frames' must be a nonempty list")
        labels = frames[0].get("objects", [])
    else:
        raise SchemaError("record has neither 'labels' nor 'frames'")
    if labels is None:
        return []
    if not isinstance(labels, list):
        raise SchemaError("labels must be a list")
    for lab in labels:
        if not isinstance(lab, dict) or "category" not in lab:
            raise SchemaError(f"label without category: {lab!r}")
    return labels


def _polylines(label: dict) -> list[np.ndarray]:
    poly = label.get("poly2d")
    if poly is None:
        raise SchemaError(f"{label['category']} label without poly2d")
    out = []
    if poly and isinstance(poly[0], dict):
        for p in poly:
            out.append(np.asarray([v[:2] for v in p["vertices"]], dtype=np.float64))
    else:
        out.append(np.asarray([v[:2] for v in poly], dtype=np.float64))
    for p in out:
        if p.ndim != 2 or len(p) < 2:
            raise SchemaError(f"{label['category']} polyline needs at least 2 points")
    return out


def _orient(line: np.ndarray) -> np.ndarray:
    # Run bottom-to-top; nearly horizontal lines run left-to-right.
    dx, dy = line[-1] - line[0]
    if abs(dy) >= abs(dx):
        return line if dy <= 0 else line[::-1]
    return line if dx >= 0 else line[::-1]


def pair_lane_edges(edges: Sequence[np.ndarray], max_distance: float) -> list[np.ndarray]:
    """Greedy pairing of single lane edges into center lines."""
    edges = [_orient(e) for e in edges]
    n = len(edges)
    samples = [resample(e, 16) for e in edges]
    cand = []
    for i in range(n):
        for j in range(i + 1, n):
            d = float(np.mean(np.hypot(*(samples[i] - samples[j]).T)))
            if d <= max_distance:
                cand.append((d, i, j))
    cand.sort()
    used: set[int] = set()
    out = []
    for _, i, j in cand:
        if i in used or j in used:
            continue
        used.update((i, j))
        out.append(center_lines(edges[i], edges[j]))
    out.extend(edges[k] for k in range(n) if k not in used)
    return out


def ingest_bdd(
    record: dict[str, Any],
    image: np.ndarray | None,
    lane_width: int = 8,
    vehicle_categories: Sequence[str] = DEFAULT_VEHICLE_CATEGORIES,
    lane_pair_distance: float = 40.0,
) -> Sample:
    """Convert one label record plus its image into a :class:`Sample`.

    Vehicle categories map to class 0, drivable and alternative areas are
    merged into one mask, and lane edges become center lines rasterized at
    ``lane_width``.
    """
    if image is None:
        raise FileNotFoundError(f"missing image for record {record.get('name', '?')!r}")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise SchemaError(f"image must be HxWx3, got {image.shape}")
    if image.dtype == np.uint8:
        image = image.astype(np.float32) / 255.0
    image = np.clip(image.astype(np.float32), 0.0, 1.0)
    H, W = image.shape[:2]
    labels = _labels(record)

    boxes, classes = [], []
    da = np.zeros((H, W), dtype=np.uint8)
    paired: list[np.ndarray] = []
    single: list[np.ndarray] = []
    for lab in labels:
        cat = lab["category"]
        if cat in vehicle_categories:
            b = lab.get("box2d")
            if not isinstance(b, dict):
                raise SchemaError(f"{cat} label without box2d")
            try:
                x1, y1, x2, y2 = (float(b[k]) for k in ("x1", "y1", "x2", "y2"))
            except KeyError as exc:
                raise SchemaError(f"box2d missing {exc}") from exc
            x1, x2 = np.clip([x1, x2], 0, W)
            y1, y2 = np.clip([y1, y2], 0, H)
            if x2 > x1 and y2 > y1:
                boxes.append((x1, y1, x2, y2))
                classes.append(0)
        elif cat in DRIVABLE:
            for poly in _polylines(lab):
                fill_polygon(da, poly)
        elif cat.startswith("lane"):
            polys = _polylines(lab)
            if len(polys) == 2:
                a, b = _orient(polys[0]), _orient(polys[1])
                paired.append(center_lines(a, b))
            else:
                single.extend(polys)
    lanes = paired + (pair_lane_edges(single, lane_pair_distance) if single else [])
    ll = rasterize_lanes(lanes, lane_width, (W, H))
    return Sample(image, np.array(boxes).reshape(-1, 4), np.array(classes, dtype=np.int64), da, ll,
                  str(record.get("name", "")), lanes)
