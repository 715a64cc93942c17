"""Command-line entry point: ``drivepercept <command> [options]``.

Every config key a command reads is exposed as a flag of the same dotted name
(``--train.epochs 40``). ``--config`` may be given several times; later files
override earlier ones and flags override files. Exit status is 0 on success,
1 on a usage or configuration error and 2 when the command itself fails.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .config import KEY_HELP, KEYS, ConfigError, ExperimentConfig, load_config, parse_config_text

log = logging.getLogger("drivepercept")

USAGE_ERROR = 1
RUNTIME_ERROR = 2

_MODEL_KEYS = ("image.W", "image.H") + tuple(k for k in KEYS if k.startswith("model."))

# Config keys read by each command; only these become flags.
CONSUMED: dict[str, tuple[str, ...]] = {
    "synth": ("image.W", "image.H", "train.lane_width", "eval.lane_width", "seed"),
    "anchors": ("image.W", "image.H", "data.root", "seed"),
    "train": tuple(k for k in KEYS if not k.startswith(("eval.", "data.vehicle", "data.lane"))),
    "eval": tuple(k for k in KEYS if k.startswith("eval.")) + ("data.root", "train.deterministic", "seed"),
    "infer": ("eval.infer_conf_thr", "eval.nms_iou", "seed"),
    "benchmark": _MODEL_KEYS + ("eval.benchmark_frames", "eval.conf_thr", "eval.nms_iou", "seed"),
}

# Commands that take their model settings from a checkpoint.
_FROM_CHECKPOINT = ("eval", "infer", "benchmark")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(USAGE_ERROR, f"{self.prog}: error: {message}\n")


def _add_config_flags(p: argparse.ArgumentParser, command: str) -> None:
    g = p.add_argument_group("config keys", "override any key read by this command")
    g.add_argument("--config", action="append", default=[], metavar="FILE",
                   help="config file of 'dotted.key: value' lines (repeatable)")
    for key in CONSUMED[command]:
        g.add_argument(f"--{key}", dest=f"cfg:{key}", metavar="V", default=None, help=KEY_HELP[key])


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="drivepercept", description="Multi-task driving perception: detection, drivable area, lanes.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("synth", help="write a synthetic dataset in the native layout")
    p.add_argument("--out", required=True, help="dataset root to write")
    p.add_argument("--n", type=int, default=16, help="number of scenes (default 16)")
    p.add_argument("--split", default="train", help="split name; lanes use train.lane_width for 'train', "
                   "eval.lane_width otherwise (default train)")
    _add_config_flags(p, "synth")

    p = sub.add_parser("anchors", help="cluster box sizes of a split into nine anchors")
    p.add_argument("--split", default="train")
    p.add_argument("--out", default=None, help="config fragment to write (model.anchors)")
    _add_config_flags(p, "anchors")

    p = sub.add_parser("train", help="train a model; writes checkpoints, train_log.txt and loss_curve.png")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="train")
    _add_config_flags(p, "train")

    p = sub.add_parser("eval", help="evaluate a checkpoint; writes metrics.txt, metrics_table.txt and pr_curve.png")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--out", default=None, help="output directory (default: the checkpoint's directory)")
    _add_config_flags(p, "eval")

    p = sub.add_parser("infer", help="run a checkpoint on images; writes JSON detections and overlays")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True, help="image file or directory of .png/.jpg images")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p, "infer")

    p = sub.add_parser("benchmark", help="time forward plus post-processing at batch size 1")
    p.add_argument("--checkpoint", default=None, help="model to time (default: a fresh model from the config)")
    _add_config_flags(p, "benchmark")
    return parser


# ---------------------------------------------------------------- config resolution


def _overrides(args: argparse.Namespace) -> dict:
    """File entries then flag values, restricted to the keys the command reads."""
    allowed = CONSUMED[args.command]
    merged: dict = {}
    for path in args.config:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from exc
        merged.update(parse_config_text(text))
    from .config import canonical_key

    out: dict = {}
    for k, v in merged.items():
        key = canonical_key(k)
        if key in allowed:
            out[key] = v
        else:
            log.info("%s does not read %s; ignored", args.command, key)
    for k, v in vars(args).items():
        if k.startswith("cfg:") and v is not None:
            out[k[4:]] = v
    return out


def _config(args: argparse.Namespace) -> ExperimentConfig:
    return load_config(overrides=_overrides(args))


def _load_model(args: argparse.Namespace):
    from .model import load_checkpoint

    path = Path(args.checkpoint)
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint at {path}")
    model, _ = load_checkpoint(path, _overrides(args))
    return model


def _seed(cfg: ExperimentConfig) -> None:
    torch.manual_seed(cfg.seed)
    torch.use_deterministic_algorithms(cfg.train.deterministic)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    from .data import SceneParams, synth_dataset, write_sample

    cfg = _config(args)
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    width = cfg.train.lane_width if args.split == "train" else cfg.eval.lane_width
    params = SceneParams(cfg.image.W, cfg.image.H, lane_width=width)
    for s in synth_dataset(args.n, cfg.seed, params):
        write_sample(args.out, args.split, s)
    print(f"wrote {args.n} scenes to {Path(args.out) / 'images' / args.split} (lane width {width})")
    return 0


def cmd_anchors(args) -> int:
    from .anchors import kmeans_anchors
    from .data import read_split

    cfg = _config(args)
    samples = read_split(cfg.data.root, args.split)
    dims = []
    for s in samples:
        # Box sizes in model-input pixels.
        sx, sy = cfg.image.W / s.size[0], cfg.image.H / s.size[1]
        b = s.boxes
        dims.append(np.stack([(b[:, 2] - b[:, 0]) * sx, (b[:, 3] - b[:, 1]) * sy], axis=1))
    dims = np.concatenate(dims) if dims else np.zeros((0, 2))
    anchors = kmeans_anchors(dims, 9, cfg.seed)
    pairs = [[round(w, 3), round(h, 3)] for w, h in anchors.to_list()]
    for stride, chunk in zip((8, 16, 32), (pairs[0:3], pairs[3:6], pairs[6:9])):
        print(f"stride {stride}: " + "  ".join(f"{w:g}x{h:g}" for w, h in chunk))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(f"model.anchors: {json.dumps(pairs)}\n")
        print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    from .data import read_split
    from .plotting import plot_losses
    from .trainer import train

    cfg = _config(args)
    _seed(cfg)
    samples = read_split(cfg.data.root, args.split)
    out = Path(args.out)
    _, hist = train(cfg, samples, out_dir=out)
    plot_losses(hist.epochs, out / "loss_curve.png", hist.stages)
    last = hist.epochs[-1]
    print(f"trained {len(hist.epochs)} epochs on {len(samples)} images; final L_all {last['L_all']:.6g}")
    print(f"wrote {out / 'last.pt'}, {out / 'train_log.txt'}, {out / 'loss_curve.png'}")
    return 0


def cmd_eval(args) -> int:
    from .data import read_split
    from .metrics import pr_curve
    from .plotting import plot_pr_curve
    from .trainer import evaluate

    model = _load_model(args)
    cfg = model.cfg
    _seed(cfg)
    samples = read_split(cfg.data.root, args.split)
    d = evaluate(model, samples, cfg, details=True)
    out = Path(args.out) if args.out else Path(args.checkpoint).parent
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.txt").write_text(d.report.to_text())
    table = d.report.table()
    (out / "metrics_table.txt").write_text(table + "\n")
    if d.n_gt:
        recall, precision = pr_curve(d.matches, d.n_gt)
        plot_pr_curve(recall, precision, d.report.map50, out / "pr_curve.png")
    print(table)
    print(f"wrote {out / 'metrics.txt'}")
    return 0


def _image_paths(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
    if path.is_file():
        return [path]
    raise FileNotFoundError(f"no image or directory at {path}")


def cmd_infer(args) -> int:
    import cv2

    from .data.io import read_image, write_image
    from .plotting import render_overlay
    from .postprocess import postprocess

    model = _load_model(args)
    cfg = model.cfg
    _seed(cfg)
    model.eval()
    W, H = model.image_size
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = _image_paths(Path(args.input))
    if not paths:
        raise FileNotFoundError(f"no images in {args.input}")
    for p in paths:
        image = read_image(p)
        h0, w0 = image.shape[:2]
        x = cv2.resize(image, (W, H), interpolation=cv2.INTER_LINEAR)
        with torch.inference_mode():
            raw = model(torch.from_numpy(x).permute(2, 0, 1)[None].contiguous())
        dets, da, ll = postprocess(raw, model.anchors, (W, H), cfg.eval.infer_conf_thr, cfg.eval.nms_iou,
                                   model.strides)
        d = dets[0].copy()
        d[:, [0, 2]] *= w0 / W
        d[:, [1, 3]] *= h0 / H
        da0 = cv2.resize(da[0].astype(np.uint8), (w0, h0), interpolation=cv2.INTER_NEAREST)
        ll0 = cv2.resize(ll[0].astype(np.uint8), (w0, h0), interpolation=cv2.INTER_NEAREST)
        record = {
            "image": p.name,
            "size": [w0, h0],
            "detections": [
                {"x1": float(r[0]), "y1": float(r[1]), "x2": float(r[2]), "y2": float(r[3]),
                 "score": float(r[4]), "class_id": int(r[5])}
                for r in d
            ],
            "drivable_fraction": float(da0.mean()),
            "lane_fraction": float(ll0.mean()),
        }
        (out / f"{p.stem}.json").write_text(json.dumps(record, indent=1) + "\n")
        write_image(out / f"{p.stem}_overlay.png", render_overlay(image, d, da0, ll0) / 255.0)
    print(f"wrote {len(paths)} detection files and overlays to {out}")
    return 0


def cmd_benchmark(args) -> int:
    from .metrics import benchmark, hardware_descriptor
    from .model import build_model
    from .postprocess import postprocess

    if args.checkpoint:
        model = _load_model(args)
        cfg = model.cfg
    else:
        cfg = _config(args)
        model = build_model(cfg)
    _seed(cfg)
    if cfg.eval.benchmark_frames < 1:
        raise UsageError("eval.benchmark_frames must be >= 1 for benchmark")
    size = model.image_size
    ms, fps = benchmark(
        model, cfg.eval.benchmark_frames, size,
        post=lambda raw: postprocess(raw, model.anchors, size, cfg.eval.conf_thr, cfg.eval.nms_iou, model.strides),
    )
    print(f"input: {size[0]}x{size[1]}")
    print(f"ms_per_frame: {ms:.3f}")
    print(f"fps: {fps:.2f}")
    print(f"hardware: {hardware_descriptor()}")
    return 0


COMMANDS = {
    "synth": cmd_synth,
    "anchors": cmd_anchors,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "benchmark": cmd_benchmark,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"drivepercept {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except Exception as exc:  # noqa: BLE001 - every failure maps to one exit status
        if args.verbose:
            log.exception("command failed")
        print(f"drivepercept {args.command}: failed: {exc}", file=sys.stderr)
        return RUNTIME_ERROR


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
