import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from drivepercept.anchors import AnchorSet
from drivepercept.losses import assign_targets
from drivepercept.model import RawOutputs
from drivepercept.postprocess import box_iou, decode, decode_boxes, nms, postprocess, seg_to_mask

from oracles import decode_cell, iou, nms_reference, random_box, sigmoid


def random_dets(rng, n, W=100, H=100, n_cls=2, coarse_scores=False):
    rows = []
    for _ in range(n):
        b = random_box(rng, W, H, 2.0)
        score = round(rng.uniform(), 1) if coarse_scores else rng.uniform()
        rows.append(b + [score, int(rng.integers(n_cls))])
    return np.array(rows, dtype=np.float64).reshape(-1, 6)


# ---------------------------------------------------------------- decode


def test_decode_zero_logits_fixed_point():
    b = decode_boxes(torch.zeros(1, 4), torch.zeros(1, 2), torch.tensor([[16.0, 16.0]]), 8)
    assert b[0].tolist() == [4.0, 4.0, 16.0, 16.0]
    d = decode(torch.zeros(1, 3, 1, 1, 6), [[16, 16], [1, 1], [2, 2]], 8, image_size=(640, 384))[0]
    assert d[0, :5].tolist() == [0.0, 0.0, 12.0, 12.0, 0.5]  # clipped at the image corner


def test_decode_size_upper_bound():
    t = torch.tensor([[0.0, 0.0, 50.0, 50.0]])
    wh = decode_boxes(t, torch.zeros(1, 2), torch.tensor([[10.0, 6.0]]), 8)[0, 2:]
    assert wh.tolist() == pytest.approx([40.0, 24.0])


def test_decode_matches_per_cell_reference():
    g = torch.Generator().manual_seed(0)
    grid = torch.randn(2, 3, 4, 5, 6, generator=g, dtype=torch.float64) * 2
    anchors = [[10.0, 13.0], [16.0, 30.0], [33.0, 23.0]]
    out = decode(grid, anchors, 8, image_size=(36, 30))
    for n in range(2):
        ref = []
        for a in range(3):
            for cy in range(4):
                for cx in range(5):
                    t = grid[n, a, cy, cx].tolist()
                    x1, y1, x2, y2 = decode_cell(t, cx, cy, *anchors[a], 8)
                    x1, x2 = min(max(x1, 0), 36), min(max(x2, 0), 36)
                    y1, y2 = min(max(y1, 0), 30), min(max(y2, 0), 30)
                    if x2 > x1 and y2 > y1:  # boxes clipped to nothing are dropped
                        ref.append([x1, y1, x2, y2, sigmoid(t[4]), 0])
        np.testing.assert_allclose(out[n], np.array(ref), rtol=1e-6, atol=1e-4)


def test_decode_multiclass_score():
    grid = torch.zeros(1, 3, 1, 1, 8)
    grid[..., 4] = 1.0
    grid[..., 5:] = torch.tensor([-1.0, 2.0, 0.5])
    d = decode(grid, [[8, 8]] * 3, 8)[0]
    assert d[0, 4] == pytest.approx(sigmoid(1.0) * sigmoid(2.0), rel=1e-6)
    assert d[0, 5] == 1


def test_decode_clips_to_image():
    grid = torch.zeros(1, 3, 1, 1, 6)
    grid[..., 2:4] = 5.0  # near 4x anchor
    d = decode(grid, [[64, 64]] * 3, 8, image_size=(32, 32))[0]
    assert (d[:, :4] >= 0).all() and (d[:, [0, 2]] <= 32).all() and (d[:, [1, 3]] <= 32).all()


@given(st.integers(0, 10**6))
@settings(max_examples=100, deadline=None)
def test_decode_inverts_assigned_gt(seed):
    # For every positive of assign_targets there are raw values decoding to the GT box.
    rng = np.random.default_rng(seed)
    W, H = 256, 128
    anchors = AnchorSet(np.sort(rng.uniform(6, 90, (9, 2)), axis=0))
    box = np.array([random_box(rng, W, H, 3.0)])
    t = assign_targets([box], [np.zeros(1, int)], anchors, [(H // s, W // s) for s in (8, 16, 32)])
    ps = anchors.per_stride()
    for s, idx in zip((8, 16, 32), t.indices):
        for _, a, gy, gx in idx.tolist():
            cx, cy = (box[0, 0] + box[0, 2]) / 2, (box[0, 1] + box[0, 3]) / 2
            w, h = box[0, 2] - box[0, 0], box[0, 3] - box[0, 1]
            aw, ah = ps[s][a]
            sig = [(cx / s - gx + 0.5) / 2, (cy / s - gy + 0.5) / 2, math.sqrt(w / aw) / 2, math.sqrt(h / ah) / 2]
            assert all(0 < v < 1 for v in sig)
            raw = [math.log(v / (1 - v)) for v in sig]
            np.testing.assert_allclose(decode_cell(raw, gx, gy, aw, ah, s), box[0], atol=1e-6)


# ---------------------------------------------------------------- NMS


def test_nms_empty():
    assert nms(np.zeros((0, 6))).shape == (0, 6)


def test_nms_identical_boxes():
    d = np.array([[0, 0, 10, 10, 0.8, 0], [0, 0, 10, 10, 0.9, 0]], float)
    out = nms(d, 0.45, 0.0)
    assert out.tolist() == [[0, 0, 10, 10, 0.9, 0]]


def test_nms_keeps_other_class():
    d = np.array([[0, 0, 10, 10, 0.9, 0], [0, 0, 10, 10, 0.8, 1]], float)
    assert len(nms(d, 0.45, 0.0)) == 2


def test_nms_tie_break_smaller_area_first():
    d = np.array([[0, 0, 20, 20, 0.5, 0], [50, 50, 55, 55, 0.5, 0], [80, 0, 90, 10, 0.5, 0]], float)
    out = nms(d, 0.45, 0.0)
    assert out[:, :4].tolist() == [[50, 50, 55, 55], [80, 0, 90, 10], [0, 0, 20, 20]]


def test_nms_conf_filter():
    d = np.array([[0, 0, 10, 10, 0.2, 0], [20, 20, 30, 30, 0.3, 0]], float)
    assert nms(d, 0.45, 0.25)[:, 4].tolist() == [0.3]


@pytest.mark.parametrize("seed", range(100))
def test_nms_matches_reference(seed):
    rng = np.random.default_rng(seed)
    d = random_dets(rng, 10, coarse_scores=seed % 2 == 0)
    thr = float(rng.choice([0.3, 0.45, 0.6]))
    conf = float(rng.choice([0.0, 0.25]))
    out = nms(d, thr, conf)
    assert out.tolist() == nms_reference(d, thr, conf)


@given(st.integers(0, 10**6))
@settings(max_examples=100, deadline=None)
def test_nms_properties(seed):
    rng = np.random.default_rng(seed)
    d = random_dets(rng, int(rng.integers(0, 25)), coarse_scores=True)
    out = nms(d, 0.45, 0.1)
    np.testing.assert_array_equal(nms(out, 0.45, 0.1), out)
    assert set(out[:, 4].tolist()) <= set(d[:, 4].tolist())
    assert (np.diff(out[:, 4]) <= 0).all()
    for i in range(len(out)):
        for j in range(i + 1, len(out)):
            if out[i, 5] == out[j, 5]:
                assert iou(out[i], out[j]) <= 0.45


def test_box_iou_matches_scalar():
    rng = np.random.default_rng(0)
    a = np.array([random_box(rng, 50, 50) for _ in range(6)])
    b = np.array([random_box(rng, 50, 50) for _ in range(4)])
    m = box_iou(a, b)
    for i in range(6):
        for j in range(4):
            assert m[i, j] == pytest.approx(iou(a[i], b[j]), abs=1e-12)


# ---------------------------------------------------------------- segmentation masks


def test_seg_to_mask_rules():
    fg = torch.zeros(1, 2, 3, 3)
    fg[:, 1] = 1.0
    assert seg_to_mask(fg).all()
    assert not seg_to_mask(torch.zeros(1, 2, 3, 3)).any()


def test_seg_to_mask_matches_per_pixel():
    z = np.random.default_rng(0).normal(size=(2, 2, 5, 7)).astype(np.float32)
    m = seg_to_mask(torch.from_numpy(z))
    for n in range(2):
        for i in range(5):
            for j in range(7):
                assert m[n, i, j] == (1 if z[n, 1, i, j] > z[n, 0, i, j] else 0)


def test_postprocess_end_to_end():
    anchors = AnchorSet([[8, 8], [8.5, 8.5], [9, 9]] + [[40 + 4 * i, 40 + 4 * i] for i in range(6)])
    det = [torch.full((1, 3, gh, gw, 6), -20.0) for gh, gw in ((4, 4), (2, 2), (1, 1))]
    det[0][0, 0, 1, 2, :5] = torch.tensor([0.0, 0.0, 0.0, 0.0, 5.0])
    det[0][0, 1, 1, 2, :5] = torch.tensor([0.1, 0.0, 0.0, 0.0, 4.0])  # duplicate with lower score
    da = torch.zeros(1, 2, 32, 32)
    da[:, 1, 16:] = 1
    dets, da_m, ll_m = postprocess(RawOutputs(det, da, torch.zeros(1, 2, 32, 32)), anchors, (32, 32),
                                   conf_thr=0.25, iou_thr=0.45)
    assert len(dets[0]) == 1 and dets[0][0, 4] == pytest.approx(sigmoid(5.0))
    np.testing.assert_allclose(dets[0][0, :4], [16, 8, 24, 16], atol=1e-5)
    assert da_m[0, 16:].all() and not da_m[0, :16].any() and not ll_m.any()
