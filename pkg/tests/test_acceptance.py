"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4 to 6 share one end-to-end training run on 16 synthetic scenes
(256x128, augmentation off, default 150-epoch budget); expect roughly a
quarter of an hour on one CPU core for the whole file.
"""

import itertools
import math
import shutil
import subprocess
import sys
import time

import numpy as np
import pytest
import torch

from drivepercept.anchors import AnchorSet, kmeans_anchors, mean_distance
from drivepercept.config import LossWeights, load_config
from drivepercept.data import SceneParams, synth_dataset
from drivepercept.losses import assign_targets, ciou_loss, detection_loss, focal_loss, seg_ce_loss, soft_iou_loss
from drivepercept.metrics import Matches, MetricsReport, ap50
from drivepercept.model import build_model, load_checkpoint
from drivepercept.postprocess import nms
from drivepercept.trainer import apply_paradigm, evaluate, train

from oracles import (
    ap_reference,
    assign_reference,
    ciou_reference,
    fd_check,
    iou,
    nms_reference,
    random_box,
)

W, H = 256, 128
N_SCENES = 16


def _checks(fns):
    """Run named checks; returns the names of those that raised or returned False."""
    failed = []
    for name, fn in fns:
        try:
            if fn() is False:
                failed.append(name)
        except AssertionError as exc:
            failed.append(f"{name} ({exc})")
    return failed


def _state(model):
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def _group(key):
    return {"encoder": "enc", "detect": "det", "da_head": "seg", "ll_head": "seg"}[key.split(".", 1)[0]]


# ---------------------------------------------------------------- 1. loss correctness


def test_criterion_1_loss_correctness(report_criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    g = torch.Generator().manual_seed(0)
    anchors = AnchorSet([[8, 8]] + [[40 + 4 * i, 40 + 4 * i] for i in range(8)])
    grids_hw = [(2, 2), (1, 1), (1, 1)]
    w = LossWeights()

    def grad_focal():
        z = torch.randn(60, generator=g) * 2
        y = (torch.rand(60, generator=g) > 0.7).double()
        fd_check(lambda t: focal_loss(t, y), z)

    def grad_ciou():
        gts = torch.tensor([random_box(rng, 60, 60) for _ in range(8)], dtype=torch.float64)
        preds = torch.tensor([random_box(rng, 60, 60) for _ in range(8)], dtype=torch.float64)
        fd_check(lambda t: ciou_loss(t, gts, detach_alpha=False), preds)

    def grad_ciou_alpha_constant():
        # With alpha detached, autograd must match differences of the oracle with alpha pinned.
        for _ in range(5):
            p, q = random_box(rng, 50, 50), random_box(rng, 50, 50)
            v = 4 / math.pi ** 2 * (math.atan((q[2] - q[0]) / (q[3] - q[1]))
                                    - math.atan((p[2] - p[0]) / (p[3] - p[1]))) ** 2
            alpha = v / ((1 - iou(p, q)) + v) if v > 0 else 0.0
            pt = torch.tensor([p], dtype=torch.float64, requires_grad=True)
            ciou_loss(pt, torch.tensor([q], dtype=torch.float64)).backward()
            for k in range(4):
                a, b = list(p), list(p)
                a[k] += 1e-4
                b[k] -= 1e-4
                num = (ciou_reference(a, q, alpha) - ciou_reference(b, q, alpha)) / 2e-4
                ana = pt.grad[0, k].item()
                assert abs(ana - num) <= 1e-3 * max(abs(ana), abs(num)) + 1e-9, (k, ana, num)

    def grad_seg_ce():
        logits = torch.randn(2, 2, 4, 5, generator=g)
        mask = (torch.rand(2, 4, 5, generator=g) > 0.5).long()
        fd_check(lambda t: seg_ce_loss(t, mask), logits)

    def grad_soft_iou():
        logits = torch.randn(2, 2, 4, 4, generator=g)
        mask = (torch.rand(2, 4, 4, generator=g) > 0.6).long()
        fd_check(lambda t: soft_iou_loss(t.softmax(dim=1)[:, 1], mask), logits)

    def grad_detection():
        grids = [torch.randn(1, 3, gh, gw, 6, generator=g, dtype=torch.float64) for gh, gw in grids_hw]
        t = assign_targets([np.array([[8.0, 0, 16, 8], [2.0, 6, 12, 14]])], [np.zeros(2, int)], anchors, grids_hw)
        sizes = [x.numel() for x in grids]

        def f(flat):
            parts = [p.view_as(x) for p, x in zip(torch.split(flat.view(-1), sizes), grids)]
            c, o, b = detection_loss(parts, t, w, anchors, detach_alpha=False)
            return w.alpha1 * c + w.alpha2 * o + w.alpha3 * b

        fd_check(f, torch.cat([x.view(-1) for x in grids]), n_probe=40)

    def ciou_cases():
        a = ciou_loss(torch.tensor([[0.0, 0, 2, 2]], dtype=torch.float64), torch.tensor([[4.0, 4, 6, 6]])).item()
        b = ciou_loss(torch.tensor([[-2.0, -1, 2, 1]], dtype=torch.float64), torch.tensor([[-1.0, -2, 1, 2]])).item()
        assert abs(a - 13 / 9) <= 1e-4, a
        assert abs(b - 0.7004) <= 1e-4, b

    def focal_cases():
        p = 0.9
        hand = focal_loss(torch.tensor([math.log(p / (1 - p))], dtype=torch.float64), torch.tensor([1.0])).item()
        assert abs(hand - 0.25 * 0.01 * -math.log(0.9)) <= 1e-6, hand
        assert abs(hand - 2.634e-4) <= 1e-6, hand
        ce = focal_loss(torch.tensor([0.0], dtype=torch.float64), torch.tensor([1.0]), gamma=0.0, alpha=1.0).item()
        assert abs(ce - math.log(2)) <= 1e-6, ce
        assert abs(focal_loss(torch.tensor([60.0], dtype=torch.float64), torch.tensor([1.0])).item()) <= 1e-6

    def soft_iou_cases():
        y = torch.tensor([[1.0, 1.0, 0.0, 0.0]], dtype=torch.float64)
        assert abs(soft_iou_loss(y.clone(), y).item()) <= 1e-6
        assert abs(soft_iou_loss(torch.zeros_like(y), y).item() - 1.0) <= 1e-6
        assert abs(soft_iou_loss(torch.full_like(y, 0.5), y).item() - 2 / 3) <= 1e-6

    failed = _checks([
        ("focal gradient", grad_focal), ("CIoU gradient", grad_ciou),
        ("CIoU gradient with detached alpha", grad_ciou_alpha_constant), ("CE gradient", grad_seg_ce),
        ("soft IoU gradient", grad_soft_iou), ("detection loss gradient", grad_detection),
        ("CIoU hand cases", ciou_cases), ("focal closed forms", focal_cases), ("soft IoU closed forms", soft_iou_cases),
    ])
    elapsed = time.perf_counter() - t0
    if elapsed >= 60:
        failed.append(f"runtime {elapsed:.1f} s >= 60 s")
    ok = not failed
    report_criterion(1, ok, f"9 check groups, {elapsed:.1f} s" + ("" if ok else "; failed: " + "; ".join(failed)))
    assert ok, failed


# ---------------------------------------------------------------- 2. oracle equivalence


def test_criterion_2_oracle_equivalence(report_criterion):
    t0 = time.perf_counter()
    failed = []

    nms_bad = 0
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(0, 30))
        coarse = seed % 2 == 0  # many score ties
        rows = [random_box(rng, 100, 100, 2.0) + [round(rng.uniform(), 1) if coarse else rng.uniform(),
                                                  int(rng.integers(3))] for _ in range(n)]
        d = np.array(rows, dtype=np.float64).reshape(-1, 6)
        thr = float(rng.choice([0.3, 0.45, 0.6]))
        conf = float(rng.choice([0.0, 0.25]))
        if nms(d, thr, conf).tolist() != nms_reference(d, thr, conf):
            nms_bad += 1
    if nms_bad:
        failed.append(f"NMS differs on {nms_bad}/1000")

    ap_cases = ap_bad = 0
    for n in range(0, 7):
        scores = np.linspace(0.95, 0.05, n) if n else np.zeros(0)
        for n_gt in range(1, 5):
            for labels in itertools.product([False, True], repeat=n):
                if sum(labels) > n_gt:
                    continue
                tp = np.array(labels, bool)
                m = Matches(tp, scores, np.zeros(n, np.int64), n_gt - int(tp.sum()), n_gt)
                got = ap50([m], [np.zeros(n_gt, np.int64)])
                want = ap_reference(list(labels), list(scores), n_gt) if n else 0.0
                ap_cases += 1
                ap_bad += abs(got - want) > 1e-12
    if ap_bad:
        failed.append(f"ap50 differs on {ap_bad}/{ap_cases}")

    assign_bad = 0
    for seed in range(200):
        rng = np.random.default_rng(10_000 + seed)
        anchors = AnchorSet(np.sort(rng.uniform(4, 90, (9, 2)), axis=0))
        grids = [(H // s, W // s) for s in (8, 16, 32)]
        boxes = [np.array([random_box(rng, W, H, 2.0) for _ in range(rng.integers(0, 6))]).reshape(-1, 4)
                 for _ in range(3)]
        t = assign_targets(boxes, [np.zeros(len(b), int) for b in boxes], anchors, grids)
        got = {(s, *map(int, row)) for s, idx in zip((8, 16, 32), t.indices) for row in idx}
        want, unmatched = assign_reference(boxes, anchors.per_stride(), grids, (8, 16, 32), 4.0)
        if got != want or sorted(t.unmatched) != sorted(unmatched):
            assign_bad += 1
    if assign_bad:
        failed.append(f"assign_targets differs on {assign_bad}/200")

    elapsed = time.perf_counter() - t0
    if elapsed >= 120:
        failed.append(f"runtime {elapsed:.1f} s >= 120 s")
    ok = not failed
    report_criterion(2, ok, f"NMS 1000 cases, AP {ap_cases} cases, assignment 200 scenes, {elapsed:.1f} s"
                     + ("" if ok else "; " + "; ".join(failed)))
    assert ok, failed


# ---------------------------------------------------------------- 3. shapes


def test_criterion_3_shapes(report_criterion):
    t0 = time.perf_counter()
    failed = []
    for (h, w) in ((384, 640), (320, 320), (192, 320)):
        for nc in (1, 3):
            cfg = load_config(overrides={"W": w, "H": h, "model.nc": nc})
            model = build_model(cfg).eval()
            with torch.no_grad():
                raw = model(torch.zeros(2, 3, h, w))
            want = [(2, 3, h // s, w // s, 5 + nc) for s in (8, 16, 32)]
            got = [tuple(t.shape) for t in raw.det]
            if got != want:
                failed.append(f"{h}x{w} nc={nc} det {got}")
            for name in ("da_logits", "ll_logits"):
                if tuple(getattr(raw, name).shape) != (2, 2, h, w):
                    failed.append(f"{h}x{w} nc={nc} {name} {tuple(getattr(raw, name).shape)}")
    elapsed = time.perf_counter() - t0
    if elapsed >= 60:
        failed.append(f"runtime {elapsed:.1f} s >= 60 s")
    ok = not failed
    report_criterion(3, ok, f"3 sizes x nc in (1, 3), {elapsed:.1f} s" + ("" if ok else "; " + "; ".join(failed)))
    assert ok, failed


# ---------------------------------------------------------------- shared training runs


@pytest.fixture(scope="module")
def scenes():
    return synth_dataset(N_SCENES, 0, SceneParams(W, H))


@pytest.fixture(scope="module")
def base_cfg(scenes):
    dims = np.concatenate([s.boxes[:, 2:] - s.boxes[:, :2] for s in scenes])
    anchors = kmeans_anchors(dims, 9, 0)
    return load_config(overrides={"W": W, "H": H, "train.augment": False, "model.anchors": anchors.to_list(),
                                  "eval.benchmark_frames": 0})


@pytest.fixture(scope="module")
def e2e(scenes, base_cfg):
    t0 = time.perf_counter()
    model, hist = train(base_cfg, scenes)
    return model, hist, evaluate(model, scenes, base_cfg), time.perf_counter() - t0


def _fmt(r: MetricsReport) -> str:
    return (f"mAP50 {r.map50:.3f}, DA mIoU {r.da_miou:.3f}, lane IoU {r.ll_iou:.3f}, "
            f"lane accuracy {r.ll_accuracy:.3f}")


# ---------------------------------------------------------------- 4. overfit


def test_criterion_4_overfit(report_criterion, e2e):
    _, _, r, elapsed = e2e
    checks = [("mAP50", r.map50, 0.90), ("DA mIoU", r.da_miou, 0.95), ("lane IoU", r.ll_iou, 0.50),
              ("lane accuracy", r.ll_accuracy, 0.70)]
    failed = [f"{name} {v:.3f} < {thr}" for name, v, thr in checks if not v >= thr]
    ok = not failed
    report_criterion(4, ok, f"{_fmt(r)} ({elapsed:.0f} s)" + ("" if ok else "; " + "; ".join(failed)))
    assert ok, failed


# ---------------------------------------------------------------- 5. paradigm


def test_criterion_5_paradigm(report_criterion, scenes, base_cfg, e2e, tmp_path_factory):
    out = tmp_path_factory.mktemp("ed_s_w")
    cfg = base_cfg.replace(**{"train.paradigm": "ED_S_W"})
    init = _state(build_model(cfg))
    model, hist = train(cfg, scenes, out_dir=out)
    r = evaluate(model, scenes, cfg)
    _, e2e_hist, e2e_r, _ = e2e
    failed = []

    stages = apply_paradigm("ED_S_W")
    after = [_state(load_checkpoint(out / f"stage{i}_{s.label}.pt")[0]) for i, s in enumerate(stages, 1)]
    for stage, before, now in zip(stages, [init] + after[:-1], after):
        moved = {_group(k) for k in before if not torch.equal(before[k], now[k])}
        if moved & stage.frozen:
            failed.append(f"stage {stage.label} changed frozen {sorted(moved & stage.frozen)}")
        if moved != {"enc", "det", "seg"} - stage.frozen:
            failed.append(f"stage {stage.label} trained {sorted(moved)}")

    if not r.map50 >= 0.9 * e2e_r.map50:
        failed.append(f"mAP50 {r.map50:.3f} < 0.9 x {e2e_r.map50:.3f}")
    if not r.da_miou >= 0.9 * e2e_r.da_miou:
        failed.append(f"DA mIoU {r.da_miou:.3f} < 0.9 x {e2e_r.da_miou:.3f}")
    la, lb = hist.final_loss, e2e_hist.final_loss
    ratio = max(la, lb) / min(la, lb)
    if not ratio <= 1.25:
        failed.append(f"L_all ratio {ratio:.2f} > 1.25")
    ok = not failed
    report_criterion(5, ok, f"ED_S_W {_fmt(r)}; end-to-end {_fmt(e2e_r)}; final L_all {la:.4f} vs {lb:.4f}"
                     + ("" if ok else "; " + "; ".join(failed)))
    assert ok, failed


# ---------------------------------------------------------------- 6. single-task


def test_criterion_6_single_task(report_criterion, scenes, base_cfg, e2e):
    _, _, multi, _ = e2e
    failed = []
    own = {"det": "map50", "da": "da_miou", "ll": "ll_accuracy"}
    parts = []
    for head, field in own.items():
        cfg = base_cfg.replace(**{"train.active_heads": [head]})
        init = _state(build_model(cfg))
        model, _ = train(cfg, scenes)
        if head == "det":
            final = _state(model)
            touched = [k for k in init if _group(k) == "seg" and not torch.equal(init[k], final[k])]
            if touched:
                failed.append(f"det-only run changed {len(touched)} seg tensors")
        r = evaluate(model, scenes, cfg)
        single, reference = getattr(r, field), getattr(multi, field)
        parts.append(f"{head} {field} {single:.3f} vs {reference:.3f}")
        if not abs(single - reference) <= 0.10 * reference:
            failed.append(f"{head}: {single:.3f} not within 10% of {reference:.3f}")
    ok = not failed
    report_criterion(6, ok, "; ".join(parts) + ("" if ok else "; " + "; ".join(failed)))
    assert ok, failed


# ---------------------------------------------------------------- 7. determinism


def _cli(*args):
    return subprocess.run([sys.executable, "-m", "drivepercept", *args], capture_output=True, text=True)


def test_criterion_7_determinism(report_criterion, tmp_path):
    size = ["--image.W", "128", "--image.H", "64"]
    data, run = tmp_path / "data", tmp_path / "run"
    reports = []
    failed = []
    for attempt in range(2):
        steps = [
            ["synth", "--seed", "7", "--n", "8", "--out", str(data)] + size,
            ["synth", "--seed", "7", "--n", "8", "--out", str(data), "--split", "val"] + size,
            ["train", "--seed", "7", "--data.root", str(data), "--out", str(run), "--train.epochs", "3",
             "--train.batch_size", "4", "--train.augment", "true", "--train.deterministic", "true"] + size,
            ["eval", "--checkpoint", str(run / "last.pt"), "--data.root", str(data)],
        ]
        for argv in steps:
            p = _cli(*argv)
            if p.returncode != 0:
                failed.append(f"run {attempt}: {argv[0]} exited {p.returncode}: {p.stderr.strip()}")
        reports.append((run / "metrics.txt").read_bytes() if (run / "metrics.txt").exists() else b"")
        if attempt == 0:
            shutil.rmtree(data)
            shutil.rmtree(run)
    if reports[0] != reports[1] or not reports[0]:
        failed.append("metrics.txt differs between runs")
    ok = not failed
    first = reports[0].decode().replace("\n", " ").strip()
    report_criterion(7, ok, f"two CLI runs, metrics.txt byte-identical [{first}]"
                     + ("" if ok else "; " + "; ".join(failed)))
    assert ok, failed


# ---------------------------------------------------------------- 8. k-means anchors


def test_criterion_8_kmeans(report_criterion):
    failed = []
    gaps = []
    for seed in range(20):
        rng = np.random.default_rng(800 + seed)
        dims = rng.uniform(1, 100, (40, 2))
        got = mean_distance(dims, kmeans_anchors(dims, 3, seed).wh)
        brute = min(mean_distance(dims, dims[rng.choice(40, 3, replace=False)]) for _ in range(1000))
        gaps.append(got - brute)
        if not got <= brute + 0.02:
            failed.append(f"dataset {seed}: {got:.4f} > {brute:.4f} + 0.02")
    worst_rel = 0.0
    for seed in range(10):
        rng = np.random.default_rng(900 + seed)
        dims = np.exp(rng.normal(3, 0.8, (60, 2)))
        a = kmeans_anchors(dims, 9, seed).wh
        for c in (0.01, 3.0, 250.0):
            b = kmeans_anchors(dims * c, 9, seed).wh
            worst_rel = max(worst_rel, float(np.max(np.abs(b - a * c) / (a * c))))
    if not worst_rel <= 1e-9:
        failed.append(f"scale equivariance off by {worst_rel:.2e}")
    ok = not failed
    report_criterion(8, ok, f"max gap to brute force {max(gaps):+.4f} (allowed +0.02), "
                     f"scale error {worst_rel:.1e} over 10 datasets x 3 scales" + ("" if ok else "; " + "; ".join(failed)))
    assert ok, failed
