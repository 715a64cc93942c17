"""Experiment configuration.

Configs are flat ``key: value`` text files. Keys are dotted (``loss.gamma3``);
a bare leaf name (``gamma3``) is accepted when it is unambiguous. Values are
YAML scalars or flow lists. Unknown keys are rejected so typos surface early.

Every key, its default and a one-line help string live in ``KEYS``; the CLI
builds its ``--dotted.key`` flags from the same table.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

PARADIGMS = ("end_to_end", "ES_W", "ED_W", "ES_D_W", "ED_S_W")
HEADS = ("det", "da", "ll")
STRIDES = (8, 16, 32)

# Nine (w, h) priors in pixels for a 640x384 input, smallest first.
DEFAULT_ANCHORS = (
    (10.0, 13.0), (16.0, 30.0), (33.0, 23.0),
    (30.0, 61.0), (62.0, 45.0), (59.0, 119.0),
    (116.0, 90.0), (156.0, 198.0), (373.0, 326.0),
)

DEFAULT_VEHICLE_CATEGORIES = ("car", "bus", "truck", "train")


class ConfigError(ValueError):
    """Raised for malformed config text or a violated invariant."""


@dataclass(frozen=True)
class ImageSize:
    W: int = 640
    H: int = 384

    def validate(self) -> None:
        for name, v in (("W", self.W), ("H", self.H)):
            if not isinstance(v, int) or v <= 0:
                raise ConfigError(f"{name} must be a positive integer, got {v!r}")
            if v % STRIDES[-1]:
                raise ConfigError(f"{name} not divisible by {STRIDES[-1]} (got {v})")


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 0.5
    alpha2: float = 1.0
    alpha3: float = 0.05
    gamma1: float = 1.0
    gamma2: float = 1.0
    gamma3: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    anchor_ratio: float = 4.0

    def validate(self) -> None:
        for f in ("alpha1", "alpha2", "alpha3", "gamma1", "gamma2", "gamma3", "focal_gamma"):
            v = getattr(self, f)
            if not math.isfinite(v) or v < 0:
                raise ConfigError(f"{f} must be a finite nonnegative number, got {v!r}")
        if max(self.gamma1, self.gamma2, self.gamma3) <= 0:
            raise ConfigError("at least one of gamma1, gamma2, gamma3 must be > 0")
        if not 0 < self.focal_alpha <= 1:
            raise ConfigError(f"focal_alpha must lie in (0, 1], got {self.focal_alpha!r}")
        if self.anchor_ratio <= 1:
            raise ConfigError(f"anchor_ratio must be > 1, got {self.anchor_ratio!r}")


@dataclass(frozen=True)
class OptimizerConfig:
    lr0: float = 0.001
    beta1: float = 0.937
    beta2: float = 0.999
    warmup_epochs: int = 3
    final_lr_fraction: float = 0.1
    grad_clip: float = 10.0

    def validate(self) -> None:
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be > 0, got {self.lr0!r}")
        for f in ("beta1", "beta2"):
            v = getattr(self, f)
            if not 0 < v < 1:
                raise ConfigError(f"{f} must lie in (0, 1), got {v!r}")
        if not self.beta1 < self.beta2:
            raise ConfigError("beta1 must be smaller than beta2")
        if not isinstance(self.warmup_epochs, int) or self.warmup_epochs < 0:
            raise ConfigError(f"warmup_epochs must be an integer >= 0, got {self.warmup_epochs!r}")
        if not 0 < self.final_lr_fraction <= 1:
            raise ConfigError(f"final_lr_fraction must lie in (0, 1], got {self.final_lr_fraction!r}")
        if not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be > 0, got {self.grad_clip!r}")


@dataclass(frozen=True)
class ModelScaleConfig:
    width_multiple: float = 0.25
    depth_multiple: float = 0.33
    nc: int = 1
    anchors_per_scale: int = 3
    strides: tuple[int, ...] = STRIDES
    anchors: tuple[tuple[float, float], ...] = DEFAULT_ANCHORS

    def validate(self) -> None:
        for f in ("width_multiple", "depth_multiple"):
            v = getattr(self, f)
            if not 0 < v <= 1:
                raise ConfigError(f"{f} must lie in (0, 1], got {v!r}")
        if not isinstance(self.nc, int) or self.nc < 1:
            raise ConfigError(f"nc must be an integer >= 1, got {self.nc!r}")
        if self.anchors_per_scale != 3:
            raise ConfigError("anchors_per_scale is fixed at 3")
        if tuple(self.strides) != STRIDES:
            raise ConfigError(f"strides must be exactly {list(STRIDES)}")
        if len(self.anchors) != 9:
            raise ConfigError(f"anchors must hold 9 (w, h) pairs, got {len(self.anchors)}")
        for w, h in self.anchors:
            if not (w > 0 and h > 0):
                raise ConfigError(f"anchor sizes must be positive, got {(w, h)}")
        # Channel floor is checked where channels are computed (model.channel_plan).
        from .model import channel_plan

        channel_plan(self.width_multiple)


@dataclass(frozen=True)
class TrainConfig:
    paradigm: str = "end_to_end"
    active_heads: tuple[str, ...] = HEADS
    epochs: int = 150
    stage_epochs: tuple[int, ...] = ()
    batch_size: int = 8
    augment: bool = True
    thr: float | None = None
    deterministic: bool = False
    debug: bool = False
    lane_width: int = 8

    def validate(self) -> None:
        if self.paradigm not in PARADIGMS:
            raise ConfigError(f"paradigm must be one of {list(PARADIGMS)}, got {self.paradigm!r}")
        if not self.active_heads:
            raise ConfigError("active_heads must be nonempty")
        for h in self.active_heads:
            if h not in HEADS:
                raise ConfigError(f"unknown head {h!r}; expected a subset of {list(HEADS)}")
        if len(set(self.active_heads)) != len(self.active_heads):
            raise ConfigError("active_heads contains duplicates")
        if not isinstance(self.epochs, int) or self.epochs < 1:
            raise ConfigError(f"epochs must be an integer >= 1, got {self.epochs!r}")
        for e in self.stage_epochs:
            if not isinstance(e, int) or e < 1:
                raise ConfigError(f"stage_epochs entries must be integers >= 1, got {e!r}")
        if not isinstance(self.batch_size, int) or self.batch_size < 1:
            raise ConfigError(f"batch_size must be an integer >= 1, got {self.batch_size!r}")
        if self.thr is not None and not self.thr > 0:
            raise ConfigError(f"thr must be > 0 when set, got {self.thr!r}")
        if not isinstance(self.lane_width, int) or self.lane_width < 1:
            raise ConfigError(f"lane_width must be an integer >= 1, got {self.lane_width!r}")


@dataclass(frozen=True)
class DataConfig:
    root: str = "data"
    vehicle_categories: tuple[str, ...] = DEFAULT_VEHICLE_CATEGORIES
    lane_pair_distance: float = 40.0

    def validate(self) -> None:
        if not self.vehicle_categories:
            raise ConfigError("vehicle_categories must be nonempty")
        if not self.lane_pair_distance > 0:
            raise ConfigError("lane_pair_distance must be > 0")


@dataclass(frozen=True)
class EvalConfig:
    conf_thr: float = 0.001
    nms_iou: float = 0.45
    match_iou: float = 0.5
    lane_width: int = 2
    benchmark_frames: int = 20
    infer_conf_thr: float = 0.25

    def validate(self) -> None:
        for f in ("conf_thr", "nms_iou", "match_iou", "infer_conf_thr"):
            v = getattr(self, f)
            if not 0 <= v <= 1:
                raise ConfigError(f"{f} must lie in [0, 1], got {v!r}")
        if not isinstance(self.lane_width, int) or self.lane_width < 1:
            raise ConfigError(f"eval lane_width must be an integer >= 1, got {self.lane_width!r}")
        if not isinstance(self.benchmark_frames, int) or self.benchmark_frames < 0:
            raise ConfigError("benchmark_frames must be an integer >= 0")


@dataclass(frozen=True)
class ExperimentConfig:
    image: ImageSize = field(default_factory=ImageSize)
    model: ModelScaleConfig = field(default_factory=ModelScaleConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optim: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def validate(self) -> "ExperimentConfig":
        self.image.validate()
        self.model.validate()
        self.loss.validate()
        self.optim.validate()
        self.train.validate()
        self.data.validate()
        self.eval.validate()
        if not isinstance(self.seed, int) or self.seed < 0:
            raise ConfigError(f"seed must be an integer >= 0, got {self.seed!r}")
        return self

    def stage_budget(self, n_stages: int) -> list[int]:
        """Epochs for each of ``n_stages`` training stages."""
        se = self.train.stage_epochs
        if not se:
            return [self.train.epochs] * n_stages
        if len(se) == 1:
            return [se[0]] * n_stages
        if len(se) != n_stages:
            raise ConfigError(f"stage_epochs has {len(se)} entries but the paradigm has {n_stages} stages")
        return list(se)

    def replace(self, **overrides: Any) -> "ExperimentConfig":
        """Copy with dotted-key overrides applied and validated."""
        return apply_overrides(self, overrides)


def _section_fields() -> dict[str, tuple[str | None, str, Any]]:
    out: dict[str, tuple[str | None, str, Any]] = {}
    default = ExperimentConfig()
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(default, f.name)
        if dataclasses.is_dataclass(value):
            for sub in dataclasses.fields(value):
                if f.name == "model" and sub.name in ("anchors_per_scale",):
                    continue
                out[f"{f.name}.{sub.name}"] = (f.name, sub.name, getattr(value, sub.name))
        else:
            out[f.name] = (None, f.name, value)
    return out


_FIELDS = _section_fields()

KEY_HELP = {
    "image.W": "input width in pixels (multiple of 32)",
    "image.H": "input height in pixels (multiple of 32)",
    "model.width_multiple": "channel multiplier in (0, 1]",
    "model.depth_multiple": "CSP repeat multiplier in (0, 1]",
    "model.nc": "number of detection classes",
    "model.strides": "detection strides (fixed [8, 16, 32])",
    "model.anchors": "nine [w, h] anchor sizes in pixels",
    "loss.alpha1": "weight of the classification term in the detection loss",
    "loss.alpha2": "weight of the objectness term in the detection loss",
    "loss.alpha3": "weight of the CIoU box term in the detection loss",
    "loss.gamma1": "weight of the detection loss in the total",
    "loss.gamma2": "weight of the drivable-area loss in the total",
    "loss.gamma3": "weight of the lane loss in the total",
    "loss.focal_gamma": "focal loss focusing exponent",
    "loss.focal_alpha": "focal loss positive-class balance",
    "loss.anchor_ratio": "max side ratio between a box and an anchor for assignment",
    "optim.lr0": "peak Adam learning rate",
    "optim.beta1": "Adam beta1",
    "optim.beta2": "Adam beta2",
    "optim.warmup_epochs": "linear warm-up length in epochs",
    "optim.final_lr_fraction": "final learning rate as a fraction of lr0",
    "optim.grad_clip": "gradient-norm clipping threshold",
    "train.paradigm": "one of " + ", ".join(PARADIGMS),
    "train.active_heads": "subset of [det, da, ll] trained in single-task mode",
    "train.epochs": "epoch budget per training stage",
    "train.stage_epochs": "per-stage epoch budgets; overrides train.epochs",
    "train.batch_size": "mini-batch size",
    "train.augment": "enable photometric and geometric augmentation",
    "train.thr": "optional early-stop threshold on the epoch-mean total loss",
    "train.deterministic": "deterministic kernels; disables timing in eval reports",
    "train.debug": "check loss identities every step and log every term",
    "train.lane_width": "lane stroke width in pixels for training targets",
    "data.root": "dataset root in the native layout",
    "data.vehicle_categories": "label categories mapped to the vehicle class",
    "data.lane_pair_distance": "max mean distance in pixels for pairing lane edges",
    "eval.conf_thr": "confidence threshold for evaluation",
    "eval.nms_iou": "NMS IoU threshold",
    "eval.match_iou": "IoU threshold for a true positive",
    "eval.lane_width": "lane stroke width in pixels for evaluation targets",
    "eval.benchmark_frames": "timed frames in eval reports (0 disables timing)",
    "eval.infer_conf_thr": "confidence threshold for inference output",
    "seed": "global random seed",
}

KEYS: tuple[str, ...] = tuple(_FIELDS)


def _leaf_aliases() -> dict[str, str]:
    counts: dict[str, list[str]] = {}
    for key in KEYS:
        counts.setdefault(key.rsplit(".", 1)[-1], []).append(key)
    return {leaf: keys[0] for leaf, keys in counts.items() if len(keys) == 1}


_ALIASES = _leaf_aliases()


def canonical_key(key: str) -> str:
    if key in _FIELDS:
        return key
    if key in _ALIASES:
        return _ALIASES[key]
    raise ConfigError(f"unknown config key {key!r}")


def _coerce(key: str, value: Any, default: Any) -> Any:
    if isinstance(value, str) and not isinstance(default, str):
        value = parse_value(value)
    if key == "train.thr":
        if value is None:
            return None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number or null, got {value!r}")
        return float(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} expects true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        return str(value)
    if isinstance(default, tuple):
        if isinstance(value, str):
            value = [v.strip() for v in value.split(",") if v.strip()]
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {value!r}")
        if key == "model.anchors":
            try:
                return tuple((float(w), float(h)) for w, h in value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{key} expects a list of [w, h] pairs") from exc
        if key in ("model.strides", "train.stage_epochs"):
            if any(isinstance(v, bool) or not isinstance(v, int) for v in value):
                raise ConfigError(f"{key} expects a list of integers, got {value!r}")
            return tuple(value)
        return tuple(str(v) for v in value)
    return value


def parse_value(text: str) -> Any:
    """Parse one value the way the config file does (YAML scalar or flow list)."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}") from exc


def apply_overrides(cfg: ExperimentConfig, overrides: dict[str, Any]) -> ExperimentConfig:
    sections: dict[str, dict[str, Any]] = {}
    top: dict[str, Any] = {}
    for raw_key, value in overrides.items():
        key = canonical_key(raw_key)
        section, name, default = _FIELDS[key]
        value = _coerce(key, value, default)
        if section is None:
            top[name] = value
        else:
            sections.setdefault(section, {})[name] = value
    for section, changes in sections.items():
        top[section] = dataclasses.replace(getattr(cfg, section), **changes)
    return dataclasses.replace(cfg, **top).validate()


def parse_config_text(text: str) -> dict[str, Any]:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError("malformed config: expected 'key: value' lines")
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(f"malformed config: nested mapping under {k!r}; use dotted keys")
    return {str(k): v for k, v in data.items()}


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> ExperimentConfig:
    """Load a config file, fill defaults, apply overrides and validate.

    ``path=None`` yields the defaults.
    """
    values: dict[str, Any] = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text()))
    if overrides:
        values.update(overrides)
    return apply_overrides(ExperimentConfig(), values)


def config_to_dict(cfg: ExperimentConfig) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, (section, name, _) in _FIELDS.items():
        value = getattr(cfg, name) if section is None else getattr(getattr(cfg, section), name)
        if isinstance(value, tuple):
            value = [list(v) if isinstance(v, tuple) else v for v in value]
        out[key] = value
    return out


def dump_config(cfg: ExperimentConfig) -> str:
    """Serialize to the flat text format; ``load`` of the result round-trips."""
    lines = []
    for key, value in config_to_dict(cfg).items():
        rendered = yaml.safe_dump(value, default_flow_style=True, width=10_000).strip()
        if rendered.endswith("\n..."):
            rendered = rendered[: -len("\n...")]
        if rendered.endswith("..."):
            rendered = rendered[:-3].strip()
        lines.append(f"{key}: {rendered}")
    return "\n".join(lines) + "\n"


def loads_config(text: str) -> ExperimentConfig:
    return apply_overrides(ExperimentConfig(), parse_config_text(text))
