from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np


class Box(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float
    class_id: int = 0


@dataclass
class Sample:
    """One image with its three label fields.

    ``boxes`` is an ``(n, 4)`` float array of ``x1, y1, x2, y2`` corners in
    pixels and ``classes`` the matching ``(n,)`` integer array. ``lanes`` keeps
    the lane center lines when they are known, so masks can be re-rasterized
    at a different stroke width (evaluation uses a thinner stroke).
    """

    image: np.ndarray
    boxes: np.ndarray
    classes: np.ndarray
    da_mask: np.ndarray
    ll_mask: np.ndarray
    id: str = ""
    lanes: list[np.ndarray] | None = field(default=None)

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        self.classes = np.asarray(self.classes, dtype=np.int64).reshape(-1)

    @property
    def size(self) -> tuple[int, int]:
        """(W, H)."""
        return self.image.shape[1], self.image.shape[0]

    def box_list(self) -> list[Box]:
        return [Box(*map(float, b), int(c)) for b, c in zip(self.boxes, self.classes)]

    def check(self) -> None:
        H, W = self.image.shape[:2]
        if self.image.ndim != 3 or self.image.shape[2] != 3:
            raise ValueError(f"image must be HxWx3, got {self.image.shape}")
        if self.image.size and (self.image.min() < 0 or self.image.max() > 1):
            raise ValueError("image values must lie in [0, 1]")
        for name in ("da_mask", "ll_mask"):
            m = getattr(self, name)
            if m.shape != (H, W):
                raise ValueError(f"{name} shape {m.shape} != image shape {(H, W)}")
            if not np.isin(m, (0, 1)).all():
                raise ValueError(f"{name} must be binary")
        if len(self.boxes) != len(self.classes):
            raise ValueError("boxes and classes differ in length")
        if len(self.boxes):
            b = self.boxes
            if not ((b[:, 0] < b[:, 2]) & (b[:, 1] < b[:, 3])).all():
                raise ValueError("degenerate box")
            if b[:, [0, 2]].min() < 0 or b[:, [0, 2]].max() > W or b[:, [1, 3]].min() < 0 or b[:, [1, 3]].max() > H:
                raise ValueError("box outside image bounds")
