"""Deterministic synthetic road scenes.

Each scene has a sky/terrain background, a road trapezoid (the drivable
area), 2-4 painted lane lines inside the road and 1-6 vehicles drawn as
filled rectangles with a window band. Everything is a pure function of
``(seed, params)``; the lane stroke width only affects the lane mask, so the
same seed rendered at train and test widths gives the same scene.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lanes import fill_polygon, rasterize_lanes
from .types import Sample

VEHICLE_COLORS = np.array([
    [0.80, 0.10, 0.10], [0.10, 0.20, 0.75], [0.95, 0.75, 0.10], [0.10, 0.55, 0.20],
    [0.55, 0.10, 0.60], [0.95, 0.45, 0.05], [0.05, 0.65, 0.70], [0.90, 0.90, 0.92],
])


@dataclass(frozen=True)
class SceneParams:
    width: int = 640
    height: int = 384
    lane_width: int = 8
    paint_width: float = 3.0
    min_vehicles: int = 1
    max_vehicles: int = 6
    min_lanes: int = 2
    max_lanes: int = 4
    noise: float = 0.02


def _road_x(edge_bottom: float, edge_top: float, y: np.ndarray, y_top: float, y_bottom: float) -> np.ndarray:
    f = (y - y_top) / (y_bottom - y_top)
    return edge_top + f * (edge_bottom - edge_top)


def _box_iou(a: np.ndarray, b: np.ndarray) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter)


def synth_scene(seed: int, params: SceneParams = SceneParams(), scene_id: str | None = None) -> Sample:
    rng = np.random.default_rng(seed)
    W, H = params.width, params.height
    ys = (np.arange(H) + 0.5)[:, None]

    horizon = H * rng.uniform(0.35, 0.5)
    bottom_l = W * rng.uniform(-0.1, 0.2)
    bottom_r = W * rng.uniform(0.8, 1.1)
    top_c = W * rng.uniform(0.4, 0.6)
    top_hw = W * rng.uniform(0.03, 0.08)
    top_l, top_r = top_c - top_hw, top_c + top_hw

    # Background: sky gradient above the horizon, textured terrain below.
    sky_top = np.array([0.35, 0.55, 0.85]) + rng.uniform(-0.05, 0.05, 3)
    sky_bot = np.array([0.75, 0.85, 0.95]) + rng.uniform(-0.05, 0.05, 3)
    ground = np.array([0.30, 0.45, 0.20]) + rng.uniform(-0.08, 0.08, 3)
    t_sky = np.clip(ys / horizon, 0, 1)[..., None]
    image = np.where(
        (ys < horizon)[..., None],
        sky_top * (1 - t_sky) + sky_bot * t_sky,
        ground,
    ) * np.ones((H, W, 3))

    road = np.array([[bottom_l, H], [top_l, horizon], [top_r, horizon], [bottom_r, H]])
    da_mask = np.zeros((H, W), dtype=np.uint8)
    fill_polygon(da_mask, road)
    road_gray = rng.uniform(0.35, 0.5)
    image[da_mask.astype(bool)] = road_gray

    # Lanes: fixed fraction across the road, optionally bending with depth.
    n_lanes = int(rng.integers(params.min_lanes, params.max_lanes + 1))
    fracs = np.sort(rng.uniform(0.15, 0.85, n_lanes))
    for i in range(1, n_lanes):
        fracs[i] = max(fracs[i], fracs[i - 1] + 0.7 / (n_lanes + 1))
    fracs = np.clip(fracs, 0.15, 0.85)
    bend = rng.uniform(-0.08, 0.08)
    y_end = horizon + 0.12 * (H - horizon)
    lane_y = np.linspace(H - 0.5, y_end, 6)
    lanes = []
    for f in fracs:
        depth = (H - lane_y) / (H - horizon)
        ff = np.clip(f + bend * depth ** 2, 0.1, 0.9)
        xl = _road_x(bottom_l, top_l, lane_y, horizon, H)
        xr = _road_x(bottom_r, top_r, lane_y, horizon, H)
        lanes.append(np.stack([xl + ff * (xr - xl), lane_y], axis=1))
    paint = rasterize_lanes(lanes, params.paint_width, (W, H)).astype(bool)
    paint_color = np.array([0.95, 0.95, 0.9]) if rng.random() < 0.7 else np.array([0.95, 0.8, 0.2])
    image[paint] = paint_color
    ll_mask = rasterize_lanes(lanes, params.lane_width, (W, H))

    image += rng.normal(0.0, params.noise, image.shape)

    # Vehicles, far to near so nearer ones occlude.
    n_veh = int(rng.integers(params.min_vehicles, params.max_vehicles + 1))
    boxes: list[np.ndarray] = []
    for _ in range(60):
        if len(boxes) == n_veh:
            break
        yb = rng.uniform(horizon + 0.15 * (H - horizon), H)
        depth = (yb - horizon) / (H - horizon)
        h = max(6.0, depth * (H - horizon) * rng.uniform(0.35, 0.6))
        w = max(6.0, h * rng.uniform(1.0, 1.6))
        xl = float(_road_x(bottom_l, top_l, np.array(yb), horizon, H))
        xr = float(_road_x(bottom_r, top_r, np.array(yb), horizon, H))
        xc = rng.uniform(xl, xr)
        box = np.array([xc - w / 2, yb - h, xc + w / 2, yb])
        box[[0, 2]] = np.clip(box[[0, 2]], 0, W)
        box[[1, 3]] = np.clip(box[[1, 3]], 0, H)
        box = np.round(box)
        if box[2] - box[0] < 6 or box[3] - box[1] < 6:
            continue
        if any(_box_iou(box, b) > 0.15 for b in boxes):
            continue
        boxes.append(box)
    boxes.sort(key=lambda b: b[3])
    for box in boxes:
        x1, y1, x2, y2 = box.astype(int)
        color = VEHICLE_COLORS[rng.integers(len(VEHICLE_COLORS))] * rng.uniform(0.8, 1.0)
        image[y1:y2, x1:x2] = color
        bh = y2 - y1
        wy1, wy2 = y1 + max(1, bh // 6), y1 + max(2, bh // 2)
        image[wy1:wy2, x1 + max(1, (x2 - x1) // 8): x2 - max(1, (x2 - x1) // 8)] = 0.12
        image[y2 - max(1, bh // 8): y2, x1:x2] = 0.05

    boxes_arr = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return Sample(
        image=np.clip(image, 0.0, 1.0).astype(np.float32),
        boxes=boxes_arr,
        classes=np.zeros(len(boxes_arr), dtype=np.int64),
        da_mask=da_mask,
        ll_mask=ll_mask,
        id=scene_id if scene_id is not None else f"synth_{seed:06d}",
        lanes=lanes,
    )


def synth_dataset(n: int, seed: int = 0, params: SceneParams = SceneParams()) -> list[Sample]:
    """``n`` scenes; scene ``i`` is seeded from ``(seed, i)`` independently."""
    out = []
    for i in range(n):
        scene_seed = int(np.random.SeedSequence([seed, i]).generate_state(1)[0])
        out.append(synth_scene(scene_seed, params, scene_id=f"{seed:04d}_{i:05d}"))
    return out
