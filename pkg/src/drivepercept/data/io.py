"""Native on-disk dataset layout.

::

    <root>/images/<split>/<id>.png   RGB image
    <root>/det/<split>/<id>.json     [{"class_id", "x1", "y1", "x2", "y2"}, ...]
    <root>/da_seg/<split>/<id>.png   8-bit drivable mask (>= 128 is foreground)
    <root>/ll_seg/<split>/<id>.png   8-bit lane mask (>= 128 is foreground)
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .types import Sample

SUBDIRS = ("images", "det", "da_seg", "ll_seg")


def _imwrite(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), array):
        raise OSError(f"could not write {path}")


def read_image(path: str | Path) -> np.ndarray:
    """RGB float32 image in [0, 1]."""
    bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise FileNotFoundError(f"cannot read image {path}")
    return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_image(path: str | Path, image: np.ndarray) -> None:
    u8 = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    _imwrite(Path(path), cv2.cvtColor(u8, cv2.COLOR_RGB2BGR))


def read_mask(path: str | Path) -> np.ndarray:
    m = cv2.imread(str(path), cv2.IMREAD_GRAYSCALE)
    if m is None:
        raise FileNotFoundError(f"cannot read mask {path}")
    return (m >= 128).astype(np.uint8)


def write_sample(root: str | Path, split: str, s: Sample) -> None:
    root = Path(root)
    write_image(root / "images" / split / f"{s.id}.png", s.image)
    det = [
        {"class_id": int(c), "x1": float(b[0]), "y1": float(b[1]), "x2": float(b[2]), "y2": float(b[3])}
        for b, c in zip(s.boxes, s.classes)
    ]
    p = root / "det" / split / f"{s.id}.json"
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(det, indent=1) + "\n")
    _imwrite(root / "da_seg" / split / f"{s.id}.png", s.da_mask.astype(np.uint8) * 255)
    _imwrite(root / "ll_seg" / split / f"{s.id}.png", s.ll_mask.astype(np.uint8) * 255)


def read_det(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    items = json.loads(Path(path).read_text())
    boxes = np.array([[d["x1"], d["y1"], d["x2"], d["y2"]] for d in items], dtype=np.float64).reshape(-1, 4)
    classes = np.array([int(d.get("class_id", 0)) for d in items], dtype=np.int64)
    return boxes, classes


def list_ids(root: str | Path, split: str) -> list[str]:
    d = Path(root) / "images" / split
    if not d.is_dir():
        raise FileNotFoundError(f"no image directory {d}")
    return sorted(p.stem for p in d.glob("*.png"))


def read_sample(root: str | Path, split: str, sample_id: str) -> Sample:
    root = Path(root)
    image = read_image(root / "images" / split / f"{sample_id}.png")
    boxes, classes = read_det(root / "det" / split / f"{sample_id}.json")
    da = read_mask(root / "da_seg" / split / f"{sample_id}.png")
    ll = read_mask(root / "ll_seg" / split / f"{sample_id}.png")
    return Sample(image, boxes, classes, da, ll, sample_id)


def read_split(root: str | Path, split: str) -> list[Sample]:
    return [read_sample(root, split, i) for i in list_ids(root, split)]
