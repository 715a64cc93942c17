"""Shared encoder with one detection and two segmentation decoders.

Layout (channels shown at ``width_multiple=1``)::

    stem  Conv 3->64   s2
    C1    Conv ->128  s2 + CSP x1          stride 4
    C2    Conv ->256  s2 + CSP x2          stride 8   (P3)
    C3    Conv ->512  s2 + CSP x3          stride 16  (P4)
    C4    Conv ->1024 s2 + CSP x1          stride 32  (P5)
    SPP(5, 9, 13) -> CSP -> Conv1x1 512                 lat32
    up2 ++ P4 -> CSP 512 -> Conv1x1 256                 lat16
    up2 ++ P3 -> CSP 256                                fpn8  (W/8, H/8, 256)
    PAN: fpn8 -> det8; Conv s2 ++ lat16 -> CSP -> det16; Conv s2 ++ lat32 -> CSP -> det32
    Seg heads (x2, separate weights): fpn8 -> 3 x [Conv, nearest up2] -> Conv 2

Parameters fall into three groups used for staged training: ``enc``
(backbone and neck), ``det`` (PAN and prediction convs) and ``seg`` (both
segmentation heads).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .anchors import AnchorSet
from .config import ConfigError, ExperimentConfig

BASE_CHANNELS = (64, 128, 256, 512, 1024)
BASE_REPEATS = (1, 2, 3, 1)
MIN_CHANNELS = 8
OBJ_PRIOR = 0.01
GROUPS = ("enc", "det", "seg")


def _make_divisible(x: float, divisor: int = 8) -> int:
    return int(math.ceil(x / divisor) * divisor)


def channel_plan(width_multiple: float) -> dict[str, int]:
    """Channel counts after scaling; raises on any count below ``MIN_CHANNELS``."""
    c = [_make_divisible(b * width_multiple) for b in BASE_CHANNELS]
    plan = {f"c{i}": v for i, v in enumerate(c)}
    fpn = plan["c2"]
    plan.update(seg1=fpn // 2, seg2=fpn // 4, seg3=fpn // 8)
    low = {k: v for k, v in plan.items() if v < MIN_CHANNELS}
    if low:
        raise ConfigError(f"channel underflow at width_multiple={width_multiple}: {low}")
    return plan


def repeats(depth_multiple: float) -> list[int]:
    return [max(round(n * depth_multiple), 1) for n in BASE_REPEATS]


class Conv(nn.Module):
    """Conv2d + BatchNorm + SiLU."""

    def __init__(self, c_in: int, c_out: int, k: int = 1, s: int = 1):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, k, s, k // 2, bias=False)
        self.bn = nn.BatchNorm2d(c_out, eps=1e-3, momentum=0.03)
        self.act = nn.SiLU()

    def forward(self, x):
        return self.act(self.bn(self.conv(x)))


class Bottleneck(nn.Module):
    def __init__(self, c: int, shortcut: bool = True):
        super().__init__()
        self.cv1 = Conv(c, c, 1)
        self.cv2 = Conv(c, c, 3)
        self.add = shortcut

    def forward(self, x):
        y = self.cv2(self.cv1(x))
        return x + y if self.add else y


class CSP(nn.Module):
    """Cross-stage partial block: half the channels go through bottlenecks,
    the other half bypass them, and the two halves are concatenated."""

    def __init__(self, c_in: int, c_out: int, n: int = 1, shortcut: bool = True):
        super().__init__()
        c_ = c_out // 2
        self.cv1 = Conv(c_in, c_, 1)
        self.cv2 = Conv(c_in, c_, 1)
        self.m = nn.Sequential(*(Bottleneck(c_, shortcut) for _ in range(n)))
        self.cv3 = Conv(2 * c_, c_out, 1)

    def forward(self, x):
        return self.cv3(torch.cat([self.m(self.cv1(x)), self.cv2(x)], dim=1))


class SPP(nn.Module):
    def __init__(self, c_in: int, c_out: int, kernels=(5, 9, 13)):
        super().__init__()
        c_ = c_in // 2
        self.cv1 = Conv(c_in, c_, 1)
        self.pools = nn.ModuleList(nn.MaxPool2d(k, 1, k // 2) for k in kernels)
        self.cv2 = Conv(c_ * (len(kernels) + 1), c_out, 1)

    def forward(self, x):
        x = self.cv1(x)
        return self.cv2(torch.cat([x] + [p(x) for p in self.pools], dim=1))


class Encoder(nn.Module):
    def __init__(self, ch: dict[str, int], n: list[int]):
        super().__init__()
        c0, c1, c2, c3, c4 = (ch[f"c{i}"] for i in range(5))
        self.stem = Conv(3, c0, 3, 2)
        self.stage1 = nn.Sequential(Conv(c0, c1, 3, 2), CSP(c1, c1, n[0]))
        self.stage2 = nn.Sequential(Conv(c1, c2, 3, 2), CSP(c2, c2, n[1]))
        self.stage3 = nn.Sequential(Conv(c2, c3, 3, 2), CSP(c3, c3, n[2]))
        self.stage4 = nn.Sequential(Conv(c3, c4, 3, 2), CSP(c4, c4, n[3]))
        self.spp = SPP(c4, c4)
        self.top_csp = CSP(c4, c4, n[3], shortcut=False)
        self.lat32 = Conv(c4, c3, 1)
        self.fpn16 = CSP(2 * c3, c3, n[3], shortcut=False)
        self.lat16 = Conv(c3, c2, 1)
        self.fpn8 = CSP(2 * c2, c2, n[3], shortcut=False)

    def forward(self, x):
        p3 = self.stage2(self.stage1(self.stem(x)))
        p4 = self.stage3(p3)
        p5 = self.stage4(p4)
        lat32 = self.lat32(self.top_csp(self.spp(p5)))
        up = F.interpolate(lat32, scale_factor=2.0, mode="nearest")
        lat16 = self.lat16(self.fpn16(torch.cat([up, p4], dim=1)))
        up = F.interpolate(lat16, scale_factor=2.0, mode="nearest")
        fpn8 = self.fpn8(torch.cat([up, p3], dim=1))
        return fpn8, lat16, lat32


class DetectHead(nn.Module):
    def __init__(self, ch: dict[str, int], n: list[int], nc: int, na: int = 3):
        super().__init__()
        c2, c3, c4 = ch["c2"], ch["c3"], ch["c4"]
        self.nc, self.na, self.no = nc, na, 5 + nc
        self.down8 = Conv(c2, c2, 3, 2)
        self.pan16 = CSP(2 * c2, c3, n[3], shortcut=False)
        self.down16 = Conv(c3, c3, 3, 2)
        self.pan32 = CSP(2 * c3, c4, n[3], shortcut=False)
        self.pred = nn.ModuleList(nn.Conv2d(c, na * self.no, 1) for c in (c2, c3, c4))

    def init_biases(self) -> None:
        prior = math.log(OBJ_PRIOR / (1 - OBJ_PRIOR))
        for conv in self.pred:
            b = conv.bias.data.view(self.na, self.no)
            b.zero_()
            b[:, 4] = prior
            b[:, 5:] = math.log(0.6 / max(self.nc - 0.99, 0.01)) if self.nc > 1 else 0.0

    def forward(self, fpn8, lat16, lat32):
        n16 = self.pan16(torch.cat([self.down8(fpn8), lat16], dim=1))
        n32 = self.pan32(torch.cat([self.down16(n16), lat32], dim=1))
        out = []
        for conv, feat in zip(self.pred, (fpn8, n16, n32)):
            y = conv(feat)
            N, _, gh, gw = y.shape
            out.append(y.view(N, self.na, self.no, gh, gw).permute(0, 1, 3, 4, 2).contiguous())
        return out


class SegHead(nn.Module):
    def __init__(self, ch: dict[str, int]):
        super().__init__()
        c, s1, s2, s3 = ch["c2"], ch["seg1"], ch["seg2"], ch["seg3"]
        self.blocks = nn.ModuleList([Conv(c, s1, 3), Conv(s1, s2, 3), Conv(s2, s3, 3)])
        self.out = nn.Conv2d(s3, 2, 3, 1, 1)

    def forward(self, x):
        for block in self.blocks:
            x = F.interpolate(block(x), scale_factor=2.0, mode="nearest")
        return self.out(x)


@dataclass
class RawOutputs:
    """Forward result. ``det[i]`` is ``N x 3 x H/s x W/s x (5 + nc)`` raw values
    ordered ``tx, ty, tw, th, tobj, tcls...`` for stride ``s = 8, 16, 32``;
    the segmentation maps are ``N x 2 x H x W`` logits."""

    det: list[torch.Tensor] | None
    da_logits: torch.Tensor | None
    ll_logits: torch.Tensor | None


class MultiTaskNet(nn.Module):
    def __init__(self, cfg: ExperimentConfig, anchors: AnchorSet | None = None):
        super().__init__()
        sc = cfg.model
        self.cfg = cfg
        self.image_size = (cfg.image.W, cfg.image.H)
        self.strides = tuple(sc.strides)
        self.nc = sc.nc
        anchors = anchors if anchors is not None else AnchorSet(np.array(sc.anchors))
        anchors.per_stride(self.strides)
        self.anchors = anchors
        self.register_buffer("anchor_wh", torch.tensor(anchors.wh, dtype=torch.float32).view(3, 3, 2),
                             persistent=False)
        ch = channel_plan(sc.width_multiple)
        n = repeats(sc.depth_multiple)
        self.channels = ch
        self.encoder = Encoder(ch, n)
        self.detect = DetectHead(ch, n, sc.nc)
        self.da_head = SegHead(ch)
        self.ll_head = SegHead(ch)
        self._init_weights()

    def _init_weights(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_uniform_(m.weight, a=math.sqrt(5))
                if m.bias is not None:
                    bound = 1 / math.sqrt(m.weight[0].numel())
                    nn.init.uniform_(m.bias, -bound, bound)
            elif isinstance(m, nn.BatchNorm2d):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        self.detect.init_biases()

    def group_modules(self) -> dict[str, list[nn.Module]]:
        return {"enc": [self.encoder], "det": [self.detect], "seg": [self.da_head, self.ll_head]}

    def head_modules(self) -> dict[str, nn.Module]:
        return {"det": self.detect, "da": self.da_head, "ll": self.ll_head}

    def param_groups(self) -> dict[str, dict[str, nn.Parameter]]:
        """Parameters keyed by group, then by their qualified name."""
        out: dict[str, dict[str, nn.Parameter]] = {g: {} for g in GROUPS}
        for name, p in self.named_parameters():
            out[group_of(name)][name] = p
        return out

    def forward(self, x: torch.Tensor, heads=("det", "da", "ll")) -> RawOutputs:
        if x.ndim != 4 or x.shape[1] != 3:
            raise ValueError(f"expected an N x 3 x H x W batch, got {tuple(x.shape)}")
        W, H = self.image_size
        if (x.shape[2], x.shape[3]) != (H, W):
            raise ValueError(f"input is {x.shape[3]}x{x.shape[2]} but the model expects {W}x{H}")
        fpn8, lat16, lat32 = self.encoder(x)
        det = self.detect(fpn8, lat16, lat32) if "det" in heads else None
        da = self.da_head(fpn8) if "da" in heads else None
        ll = self.ll_head(fpn8) if "ll" in heads else None
        return RawOutputs(det, da, ll)


def group_of(param_name: str) -> str:
    head = param_name.split(".", 1)[0]
    return {"encoder": "enc", "detect": "det", "da_head": "seg", "ll_head": "seg"}[head]


def build_model(cfg: ExperimentConfig, anchors: AnchorSet | None = None, seed: int | None = None) -> MultiTaskNet:
    """Build the network; initialization is seeded from ``cfg.seed`` unless ``seed`` is given."""
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(cfg.seed if seed is None else seed)
        model = MultiTaskNet(cfg, anchors)
    return model


def forward(model: MultiTaskNet, batch) -> RawOutputs:
    """Run the model on an ``N x 3 x H x W`` batch with values in [0, 1]."""
    if isinstance(batch, np.ndarray):
        batch = torch.from_numpy(np.ascontiguousarray(batch, dtype=np.float32))
    return model(batch)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


CHECKPOINT_FORMAT = 1


def save_checkpoint(path, model: MultiTaskNet, extra: dict | None = None) -> None:
    """Write a checkpoint.

    The container is a ``torch.save`` dict with keys ``format``, ``config``
    (flat config text), ``anchors`` (nine [w, h] pairs), ``params``
    (``{group: {qualified name: tensor}}``), ``buffers`` (batch-norm
    statistics by name), ``rng`` (torch CPU generator state) and ``extra``.
    """
    from .config import dump_config

    params: dict[str, dict[str, torch.Tensor]] = {g: {} for g in GROUPS}
    for name, p in model.named_parameters():
        params[group_of(name)][name] = p.detach().clone()
    buffers = {name: b.detach().clone() for name, b in model.named_buffers() if name != "anchor_wh"}
    torch.save(
        {
            "format": CHECKPOINT_FORMAT,
            "config": dump_config(model.cfg),
            "anchors": model.anchors.to_list(),
            "params": params,
            "buffers": buffers,
            "rng": torch.get_rng_state(),
            "extra": extra or {},
        },
        str(path),
    )


def load_checkpoint(path, overrides: dict | None = None) -> tuple[MultiTaskNet, dict]:
    """Rebuild the model stored at ``path``; returns ``(model, raw container)``."""
    from .config import loads_config

    ckpt = torch.load(str(path), map_location="cpu", weights_only=False)
    if ckpt.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a checkpoint of format {CHECKPOINT_FORMAT}")
    cfg = loads_config(ckpt["config"])
    if overrides:
        cfg = cfg.replace(**overrides)
    model = MultiTaskNet(cfg, AnchorSet(np.array(ckpt["anchors"])))
    state = {name: t for group in ckpt["params"].values() for name, t in group.items()}
    state.update(ckpt["buffers"])
    model.load_state_dict(state, strict=True)
    return model, ckpt
