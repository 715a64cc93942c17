"""Training and evaluation.

Training runs the stages of a paradigm in order. A stage freezes some
parameter groups (no optimizer updates, batch-norm statistics fixed) and
trains a subset of heads; inactive heads are not evaluated at all, so they
receive no gradient.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn as nn

from .anchors import AnchorSet
from .config import HEADS, ExperimentConfig, OptimizerConfig
from .data.lanes import rasterize_lanes
from .data.transforms import augment, resize_sample, sample_rng
from .data.types import Sample
from .losses import LossBreakdown, assign_targets, total_loss
from .metrics import ConfusionCounts, MetricsReport, ap50, benchmark, lane_metrics, match_detections, miou, recall50
from .model import MultiTaskNet, build_model, save_checkpoint
from .postprocess import postprocess

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, message: str, checkpoint: Path | None = None):
        super().__init__(message)
        self.checkpoint = checkpoint


def lr_at(epoch: int, stage_epochs: int, optim: OptimizerConfig) -> float:
    """Learning rate for ``epoch`` of a stage lasting ``stage_epochs`` epochs.

    Linear warm-up from ``lr0 / 10`` to ``lr0`` over ``warmup_epochs``, then a
    cosine decay reaching ``lr0 * final_lr_fraction`` at the last epoch.
    """
    if not 0 <= epoch < stage_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {stage_epochs})")
    lr0, f = optim.lr0, optim.final_lr_fraction
    warm = min(optim.warmup_epochs, stage_epochs - 1)
    if epoch < warm:
        return lr0 / 10 + (lr0 - lr0 / 10) * epoch / warm
    span = stage_epochs - 1 - warm
    if span <= 0:
        return lr0 * f
    progress = (epoch - warm) / span
    return lr0 * (f + (1 - f) * 0.5 * (1 + math.cos(math.pi * progress)))


@dataclass(frozen=True)
class Stage:
    label: str
    frozen: frozenset[str]
    heads: tuple[str, ...]


_PARADIGMS = {
    "end_to_end": [("W", (), HEADS)],
    "ES_W": [("ES", ("det",), ("da", "ll")), ("W", (), HEADS)],
    "ED_W": [("ED", ("seg",), ("det",)), ("W", (), HEADS)],
    "ES_D_W": [("ES", ("det",), ("da", "ll")), ("D", ("enc", "seg"), ("det",)), ("W", (), HEADS)],
    "ED_S_W": [("ED", ("seg",), ("det",)), ("S", ("enc", "det"), ("da", "ll")), ("W", (), HEADS)],
}


def apply_paradigm(paradigm: str) -> list[Stage]:
    """Stage sequence (frozen groups, trained heads) of a training paradigm."""
    if paradigm not in _PARADIGMS:
        raise ValueError(f"unknown paradigm {paradigm!r}")
    return [Stage(label, frozenset(frozen), heads) for label, frozen, heads in _PARADIGMS[paradigm]]


@dataclass
class TrainHistory:
    epochs: list[dict] = field(default_factory=list)
    stages: list[tuple[str, int, int]] = field(default_factory=list)  # label, first, last global epoch
    evals: list[tuple[int, MetricsReport]] = field(default_factory=list)

    def column(self, key: str) -> np.ndarray:
        return np.array([e[key] for e in self.epochs])

    @property
    def final_loss(self) -> float:
        return self.epochs[-1]["L_all"]


# ---------------------------------------------------------------- batching


@dataclass
class Batch:
    images: torch.Tensor
    boxes: list[np.ndarray]
    classes: list[np.ndarray]
    da: torch.Tensor
    ll: torch.Tensor


def collate(samples: Sequence[Sample]) -> Batch:
    images = torch.from_numpy(np.stack([s.image for s in samples]).astype(np.float32)).permute(0, 3, 1, 2)
    return Batch(
        images.contiguous(),
        [s.boxes for s in samples],
        [s.classes for s in samples],
        torch.from_numpy(np.stack([s.da_mask for s in samples]).astype(np.int64)),
        torch.from_numpy(np.stack([s.ll_mask for s in samples]).astype(np.int64)),
    )


def _fit(s: Sample, size: tuple[int, int]) -> Sample:
    return s if s.size == size else resize_sample(s, size)


def _train_sample(s: Sample, size: tuple[int, int], lane_width: int) -> Sample:
    """Resize to the model input and redraw lanes at the training width when center lines are known."""
    s = _fit(s, size)
    if s.lanes is None:
        return s
    return replace(s, ll_mask=rasterize_lanes(s.lanes, lane_width, s.size))


# ---------------------------------------------------------------- training


def _set_deterministic(on: bool) -> None:
    torch.use_deterministic_algorithms(on)


def _stage_modules(model: MultiTaskNet, stage: Stage, heads: tuple[str, ...]) -> list[nn.Module]:
    """Modules frozen in a stage: its frozen groups plus every inactive head."""
    groups = model.group_modules()
    frozen = [m for g in sorted(stage.frozen) for m in groups[g]]
    for name, module in model.head_modules().items():
        if name not in heads and module not in frozen:
            frozen.append(module)
    return frozen


def _loss_for_batch(model: MultiTaskNet, batch: Batch, cfg: ExperimentConfig, heads) -> LossBreakdown:
    raw = model(batch.images, heads=heads)
    targets = None
    if "det" in heads:
        grid_shapes = [tuple(g.shape[2:4]) for g in raw.det]
        targets = assign_targets(batch.boxes, batch.classes, model.anchors, grid_shapes,
                                 model.strides, cfg.loss.anchor_ratio)
    return total_loss(raw, targets, batch.da, batch.ll, cfg.loss, model.anchors, heads, model.strides)


def train(
    cfg: ExperimentConfig,
    dataset: Sequence[Sample],
    anchors: AnchorSet | None = None,
    out_dir: str | Path | None = None,
    eval_every: int = 0,
    eval_set: Sequence[Sample] | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> tuple[MultiTaskNet, TrainHistory]:
    """Train a fresh model on ``dataset`` following ``cfg.train.paradigm``.

    With ``out_dir`` set, writes ``train_log.txt``, a checkpoint at the end of
    each stage, ``best.pt`` (lowest epoch-mean total loss) and ``last.pt``.
    """
    cfg.validate()
    if not dataset:
        raise ValueError("training set is empty")
    _set_deterministic(cfg.train.deterministic)
    torch.manual_seed(cfg.seed)
    size = (cfg.image.W, cfg.image.H)
    samples = [_train_sample(s, size, cfg.train.lane_width) for s in dataset]
    model = build_model(cfg, anchors)
    stages = apply_paradigm(cfg.train.paradigm)
    budgets = cfg.stage_budget(len(stages))
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    log_lines: list[str] = []
    history = TrainHistory()
    best = math.inf
    last_ckpt: Path | None = None
    fixed = None if cfg.train.augment else [collate([s]) for s in samples]
    bs = cfg.train.batch_size
    global_epoch = 0

    for si, (stage, n_epochs) in enumerate(zip(stages, budgets)):
        heads = tuple(h for h in stage.heads if h in cfg.train.active_heads)
        if not heads:
            log.info("stage %s has no active head in %s; skipped", stage.label, cfg.train.active_heads)
            continue
        frozen = _stage_modules(model, stage, heads)
        frozen_ids = {id(p) for m in frozen for p in m.parameters()}
        for p in model.parameters():
            p.requires_grad_(id(p) not in frozen_ids)
        trainable = [p for p in model.parameters() if p.requires_grad]
        if not trainable:
            raise TrainingError(f"stage {stage.label} has nothing to train")
        opt = torch.optim.Adam(trainable, lr=cfg.optim.lr0, betas=(cfg.optim.beta1, cfg.optim.beta2))
        first = global_epoch
        for epoch in range(n_epochs):
            lr = lr_at(epoch, n_epochs, cfg.optim)
            for g in opt.param_groups:
                g["lr"] = lr
            model.train()
            for m in frozen:
                m.eval()
            order = np.random.default_rng([cfg.seed, si, epoch]).permutation(len(samples))
            sums: dict[str, float] = {}
            n_batches = 0
            for start in range(0, len(order), bs):
                idx = order[start:start + bs]
                if fixed is not None:
                    parts = [fixed[i] for i in idx]
                    batch = Batch(torch.cat([p.images for p in parts]), [p.boxes[0] for p in parts],
                                  [p.classes[0] for p in parts], torch.cat([p.da for p in parts]),
                                  torch.cat([p.ll for p in parts]))
                else:
                    batch = collate([augment(samples[i], sample_rng(cfg.seed, samples[i].id, global_epoch))
                                     for i in idx])
                breakdown = _loss_for_batch(model, batch, cfg, heads)
                if not torch.isfinite(breakdown.L_all):
                    raise TrainingError(f"non-finite loss at epoch {global_epoch} (stage {stage.label})", last_ckpt)
                if cfg.train.debug:
                    breakdown.check(cfg.loss)
                    log.debug("epoch %d batch %d %s", global_epoch, n_batches, breakdown.as_floats())
                opt.zero_grad(set_to_none=True)
                breakdown.L_all.backward()
                torch.nn.utils.clip_grad_norm_(trainable, cfg.optim.grad_clip)
                opt.step()
                for k, v in breakdown.as_floats().items():
                    sums[k] = sums.get(k, 0.0) + v
                n_batches += 1
            rec = {"epoch": global_epoch, "stage": stage.label, "lr": lr}
            rec.update({k: v / n_batches for k, v in sums.items()})
            history.epochs.append(rec)
            line = f"epoch {global_epoch} stage {stage.label} lr {lr:.6g} " + " ".join(
                f"{k} {rec[k]:.6g}" for k in sums)
            log_lines.append(line)
            log.info(line)
            if on_epoch is not None:
                on_epoch(rec)
            if eval_every and (global_epoch + 1) % eval_every == 0:
                history.evals.append((global_epoch, evaluate(model, eval_set or dataset, cfg)))
            if out is not None and rec["L_all"] < best:
                best = rec["L_all"]
                save_checkpoint(out / "best.pt", model, {"epoch": global_epoch, "stage": stage.label})
            global_epoch += 1
            if cfg.train.thr is not None and rec["L_all"] < cfg.train.thr:
                break
        history.stages.append((stage.label, first, global_epoch - 1))
        if out is not None:
            last_ckpt = out / f"stage{si + 1}_{stage.label}.pt"
            save_checkpoint(last_ckpt, model, {"epoch": global_epoch - 1, "stage": stage.label})

    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    if out is not None:
        save_checkpoint(out / "last.pt", model, {"epoch": global_epoch - 1})
        (out / "train_log.txt").write_text("\n".join(log_lines) + "\n")
    return model, history


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalDetails:
    report: MetricsReport
    matches: list
    n_gt: int
    da_counts: ConfusionCounts
    ll_counts: ConfusionCounts


def _eval_lane_mask(s: Sample, width: int) -> np.ndarray:
    if s.lanes is None:
        return s.ll_mask
    return rasterize_lanes(s.lanes, width, s.size)


def evaluate(model: MultiTaskNet, dataset: Sequence[Sample], cfg: ExperimentConfig | None = None,
             details: bool = False, batch_size: int = 8):
    """Run inference over a split and compute every metric.

    Lane ground truth is re-drawn at ``cfg.eval.lane_width`` when the center
    lines are known. Timing is skipped (reported as NaN) in deterministic mode
    or when ``eval.benchmark_frames`` is 0.
    """
    cfg = cfg or model.cfg
    if not dataset:
        raise ValueError("evaluation split is empty")
    size = model.image_size
    model.eval()
    matches = []
    gt_classes = []
    da_c = ConfusionCounts()
    ll_c = ConfusionCounts()
    n_gt = 0
    with torch.inference_mode():
        for start in range(0, len(dataset), batch_size):
            chunk = [_fit(s, size) for s in dataset[start:start + batch_size]]
            batch = collate(chunk)
            raw = model(batch.images)
            dets, da, ll = postprocess(raw, model.anchors, size, cfg.eval.conf_thr, cfg.eval.nms_iou, model.strides)
            for s, d, dm, lm in zip(chunk, dets, da, ll):
                matches.append(match_detections(d, s.boxes, s.classes, cfg.eval.match_iou))
                gt_classes.append(s.classes)
                n_gt += len(s.boxes)
                da_c = da_c + ConfusionCounts.from_masks(dm, s.da_mask)
                ll_c = ll_c + ConfusionCounts.from_masks(lm, _eval_lane_mask(s, cfg.eval.lane_width))
    acc, iou = lane_metrics(ll_c)
    ms = fps = float("nan")
    if cfg.eval.benchmark_frames > 0 and not cfg.train.deterministic:
        ms, fps = benchmark(
            model, cfg.eval.benchmark_frames, size,
            post=lambda raw: postprocess(raw, model.anchors, size, cfg.eval.conf_thr, cfg.eval.nms_iou, model.strides),
        )
    report = MetricsReport(recall50(matches), ap50(matches, gt_classes), miou(da_c), acc, iou, ms, fps)
    if details:
        return EvalDetails(report, matches, n_gt, da_c, ll_c)
    return report
