"""Report figures (matplotlib, file output only) and inference overlays."""

from __future__ import annotations

from pathlib import Path

import cv2
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.ticker import MaxNLocator  # noqa: E402

# PNG metadata without the version string keeps figures byte-stable across installs.
_PNG_META = {"Software": None}

LOSS_TERMS = ("L_class", "L_obj", "L_box", "L_det", "L_da_seg", "L_ll_seg", "L_all")

DRIVABLE_RGB = np.array([0.0, 0.8, 0.0])
LANE_RGB = np.array([0.0, 0.2, 1.0])
BOX_RGB = (255, 64, 0)


def plot_pr_curve(recall, precision, ap: float, path) -> Path:
    """Precision-recall curve with its all-point envelope."""
    recall = np.asarray(recall, float)
    precision = np.asarray(precision, float)
    fig, ax = plt.subplots(figsize=(5, 4), dpi=100)
    if len(recall):
        env = np.maximum.accumulate(precision[::-1])[::-1]
        ax.plot(recall, precision, color="0.6", lw=1, label="precision")
        ax.step(np.concatenate([[0.0], recall]), np.concatenate([[env[0]], env]), where="pre",
                color="C0", lw=2, label="envelope")
    ax.set_xlim(0, 1)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("recall")
    ax.set_ylabel("precision")
    ax.set_title(f"PR curve at IoU 0.5, AP50 = {ap:.3f}")
    ax.grid(alpha=0.3)
    ax.legend(loc="lower left")
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def plot_losses(epochs: list[dict], path, stages=()) -> Path:
    """Per-epoch loss terms on a log axis; ``stages`` are ``(label, first, last)`` spans."""
    fig, ax = plt.subplots(figsize=(7, 4), dpi=100)
    x = np.array([e["epoch"] for e in epochs])
    for term in LOSS_TERMS:
        y = np.array([e.get(term, np.nan) for e in epochs], float)
        if np.isfinite(y).any() and (y[np.isfinite(y)] > 0).any():
            ax.plot(x, y, lw=2 if term == "L_all" else 1, label=term)
    for i, (label, first, last) in enumerate(stages):
        if i % 2:
            ax.axvspan(first - 0.5, last + 0.5, color="0.92", zorder=0)
        ax.text((first + last) / 2, 1.0, label, transform=ax.get_xaxis_transform(), ha="center", va="bottom")
    ax.set_yscale("log")
    ax.xaxis.set_major_locator(MaxNLocator(integer=True))
    ax.set_xlabel("epoch")
    ax.set_ylabel("epoch-mean loss")
    ax.grid(alpha=0.3, which="both")
    ax.legend(fontsize=8, ncol=2)
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, metadata=_PNG_META)
    plt.close(fig)
    return path


def read_train_log(path) -> list[dict]:
    """Parse ``train_log.txt`` lines back into epoch records."""
    out = []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if len(tok) < 2 or tok[0] != "epoch":
            continue
        rec: dict = {}
        for k, v in zip(tok[::2], tok[1::2]):
            rec[k] = v if k == "stage" else float(v)
        rec["epoch"] = int(rec["epoch"])
        out.append(rec)
    return out


def render_overlay(image: np.ndarray, dets: np.ndarray, da: np.ndarray, ll: np.ndarray, alpha: float = 0.45) -> np.ndarray:
    """uint8 RGB overlay: drivable area tinted green, lanes blue, vehicle box outlines."""
    out = image.astype(np.float64).copy()
    da = da.astype(bool)
    ll = ll.astype(bool)
    out[da] = (1 - alpha) * out[da] + alpha * DRIVABLE_RGB
    out[ll] = LANE_RGB
    u8 = np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)
    u8 = np.ascontiguousarray(u8)
    for x1, y1, x2, y2 in np.asarray(dets, float).reshape(-1, 6)[:, :4]:
        cv2.rectangle(u8, (int(round(x1)), int(round(y1))), (int(round(x2)) - 1, int(round(y2)) - 1), BOX_RGB, 1)
    return u8
