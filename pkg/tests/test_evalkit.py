from itertools import permutations

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from s3tta import evalkit, imgeom, segnet
from s3tta.augment import AugmentationPolicy, StyleBank
from s3tta.evalkit import dice_jaccard, f1_at, iou_matrix, match


def brute_force_f1(pred, gt, tau):
    """Exhaustive optimal matching over all injective assignments."""
    p_ids = [i for i in np.unique(pred) if i > 0]
    g_ids = [j for j in np.unique(gt) if j > 0]
    if not p_ids and not g_ids:
        return 1.0

    def iou(i, j):
        a, b = pred == i, gt == j
        return (a & b).sum() / (a | b).sum()

    best = 0
    small, large, swap = (p_ids, g_ids, False) if len(p_ids) <= len(g_ids) else (g_ids, p_ids, True)
    for perm in permutations(large, len(small)):
        hits = 0
        for s, l in zip(small, perm):
            i, j = (l, s) if swap else (s, l)
            hits += iou(i, j) >= tau
        best = max(best, hits)
    return 2 * best / (len(p_ids) + len(g_ids))


def crafted_cases():
    """Instance maps with <= 5 instances per side, including greedy-trap layouts."""
    cases = []
    # greedy trap: pred 1 overlaps gt 1 best, but only pred 1 can serve gt 2
    gt = np.zeros((3, 6), int)
    gt[:, 0:3], gt[:, 3:6] = 1, 2
    pred = np.zeros((3, 6), int)
    pred[:, 1:5] = 1
    pred[:, 0:1] = 2
    cases.append((pred, gt))
    # greedy trap: the best pair (p1, g1) blocks a two-pair assignment at tau = 0.25
    gt = np.zeros((1, 14), int)
    gt[0, :10], gt[0, 10:] = 1, 2
    pred = np.zeros((1, 14), int)
    pred[0, 4:13], pred[0, :4] = 1, 2
    cases.append((pred, gt))
    rng = np.random.default_rng(0)
    while len(cases) < 30:
        h, w = rng.integers(4, 9, size=2)
        gt = rng.integers(0, rng.integers(2, 6) + 1, size=(h, w))
        pred = gt.copy()
        flip = rng.random((h, w)) < rng.uniform(0, 0.5)
        pred[flip] = rng.integers(0, 6, size=flip.sum())
        cases.append((pred, gt))
    return cases


def test_iou_self_is_identity():
    gt = np.zeros((6, 6), int)
    gt[:2, :2], gt[3:, 3:] = 1, 2
    np.testing.assert_array_equal(iou_matrix(gt, gt), np.eye(2))


def test_iou_disjoint_is_zero():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[:2, :2], b[2:, 2:] = 1, 1
    assert iou_matrix(a, b).tolist() == [[0.0]]


def test_iou_overlapping_squares():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[0:2, 0:2] = 1
    b[0:2, 1:3] = 1
    assert iou_matrix(a, b)[0, 0] == pytest.approx(2 / 6)


def test_iou_shape_mismatch():
    with pytest.raises(ValueError):
        iou_matrix(np.zeros((2, 2), int), np.zeros((3, 2), int))


@pytest.mark.parametrize("tau", evalkit.DEFAULT_THRESHOLDS)
def test_perfect_prediction(tau):
    gt = np.zeros((8, 8), int)
    gt[1:3, 1:3], gt[5:8, 4:8] = 1, 2
    assert f1_at(gt, gt, tau) == 1.0


def test_empty_vs_empty():
    z = np.zeros((4, 4), int)
    assert f1_at(z, z) == 1.0


def test_one_of_two_found():
    gt = np.zeros((10, 10), int)
    gt[0:5, 0:4] = 1  # 20 px
    gt[6:9, 6:9] = 2
    pred = np.zeros_like(gt)
    pred[0:4, 0:4] = 1  # IoU 16/20 = 0.8
    m = match(pred, gt, 0.5)
    assert (m.tp, m.fp, m.fn) == (1, 0, 1)
    assert m.f1 == pytest.approx(2 / 3)


def test_matching_equals_exhaustive_oracle():
    for pred, gt in crafted_cases():
        for tau in (0.3, 0.5, 0.6, 0.7):
            assert f1_at(pred, gt, tau) == pytest.approx(brute_force_f1(pred, gt, tau), abs=1e-12)


def test_greedy_trap_case_needs_optimal_matching():
    pred, gt = crafted_cases()[1]
    tau = 0.25
    iou = iou_matrix(pred, gt)
    # greedy: repeatedly take the highest remaining IoU pair
    used_p, used_g, greedy = set(), set(), 0
    for flat in np.argsort(-iou, axis=None):
        i, j = np.unravel_index(flat, iou.shape)
        if iou[i, j] >= tau and i not in used_p and j not in used_g:
            used_p.add(i), used_g.add(j)
            greedy += 1
    assert match(pred, gt, tau).tp > greedy


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_f1_properties(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 5, size=(6, 6))
    pred = np.where(rng.random((6, 6)) < 0.3, rng.integers(0, 5, size=(6, 6)), gt)
    # relabeling invariance
    perm = np.concatenate([[0], rng.permutation(np.arange(1, 5)) + 10])
    assert f1_at(perm[pred], gt) == pytest.approx(f1_at(pred, gt))
    assert f1_at(pred, perm[gt]) == pytest.approx(f1_at(pred, gt))
    # monotone in tau
    vals = [f1_at(pred, gt, t) for t in (0.1, 0.3, 0.5, 0.6, 0.7, 0.9)]
    assert all(b <= a + 1e-12 for a, b in zip(vals, vals[1:]))
    # one-to-one bookkeeping
    m = match(pred, gt, 0.5)
    assert m.tp + m.fp == len(np.unique(pred[pred > 0]))
    assert m.tp + m.fn == len(np.unique(gt[gt > 0]))


def test_dice_jaccard_examples():
    a = np.zeros((4, 4), bool)
    a[0, :] = True
    assert dice_jaccard(a, a) == (1.0, 1.0)
    b = np.zeros((4, 4), bool)
    b[3, :] = True
    assert dice_jaccard(a, b) == (0.0, 0.0)
    c = np.zeros((4, 4), bool)
    c[0, 2:] = True
    c[1, :2] = True
    d, j = dice_jaccard(a, c)
    assert d == pytest.approx(0.5) and j == pytest.approx(1 / 3)
    z = np.zeros((3, 3), bool)
    assert dice_jaccard(z, z) == (1.0, 1.0)


def test_dice_jaccard_identity_on_random_masks():
    rng = np.random.default_rng(1)
    for _ in range(200):
        a = rng.random((8, 8)) < rng.random()
        b = rng.random((8, 8)) < rng.random()
        d, j = dice_jaccard(a, b)
        assert d >= j - 1e-12
        assert d == pytest.approx(2 * j / (1 + j), abs=1e-12)


class NoiseST:
    """Style network stand-in whose stylized output is bright i.i.d. uniform noise."""

    stride = 1

    def __init__(self, seed=0):
        self.gen = torch.Generator().manual_seed(seed)

    def encode(self, x):
        return [x]

    def pad(self, x):
        return x, (0, 0, 0, 0)

    @staticmethod
    def unpad(x, pads):
        return x

    def encoder(self, x):
        return [x]

    def decoder(self, t):
        return 0.5 + 0.5 * torch.rand(t.shape, generator=self.gen)


class ThresholdNet(torch.nn.Module):
    """Pointwise 'segmenter': bright pixels are interior."""

    def probs(self, x):
        v = x.mean(1, keepdim=True)
        interior = torch.sigmoid((v - 0.5) * 40)
        return torch.cat([1 - interior, interior, torch.zeros_like(v)], 1)


def blob_image():
    img = np.full((24, 24, 3), 0.1, dtype=np.float32)
    gt = np.zeros((24, 24), int)
    gt[3:10, 3:10], gt[13:21, 12:20] = 1, 2
    img[gt > 0] = 0.9
    return img, gt


def test_aggregate_all_single_policy_equals_plain():
    net = ThresholdNet()
    img, gt = blob_image()
    got = evalkit.baseline_aggregate_all(img, None, net, None, [AugmentationPolicy(1.0, -1)], [0])
    assert np.array_equal(got, segnet.predict_plain(net, img))
    assert f1_at(got, gt) == 1.0


def test_aggregate_all_degraded_by_noise_policy():
    net = ThresholdNet()
    img, gt = blob_image()
    bank = StyleBank([img], ["noise"])
    policies = [AugmentationPolicy(1.0, -1), AugmentationPolicy(1.0, 0), AugmentationPolicy(2.0, 0)]
    agg = evalkit.baseline_aggregate_all(img, NoiseST(), net, bank, policies, imgeom.ANGLES)
    sel = segnet.predict_s3tta(img, NoiseST(), net, bank, policies, imgeom.ANGLES)
    assert f1_at(sel, gt) == 1.0
    assert f1_at(agg, gt) < f1_at(sel, gt)


def test_aggregate_all_deterministic():
    torch.manual_seed(0)
    from s3tta.styletx import StyleTransfer

    st_model = StyleTransfer().eval()
    net = segnet.SegNet().eval()
    img, _ = blob_image()
    bank = StyleBank([img], ["s"])
    pols = [AugmentationPolicy(1.0, 0), AugmentationPolicy(1.5, 0)]
    a = evalkit.baseline_aggregate_all(img, st_model, net, bank, pols, imgeom.ANGLES)
    b = evalkit.baseline_aggregate_all(img, st_model, net, bank, pols, imgeom.ANGLES)
    assert np.array_equal(a, b)


def test_embed_project_contract():
    torch.manual_seed(1)
    from s3tta.styletx import StyleTransfer

    st_model = StyleTransfer().eval()
    rng = np.random.default_rng(2)
    imgs = [rng.random((16, 16, 3)).astype(np.float32) for _ in range(4)]
    imgs.append(imgs[0].copy())
    pts = evalkit.embed_project(imgs, st_model)
    assert pts.shape == (5, 2)
    np.testing.assert_allclose(pts[0], pts[4], atol=1e-6)
    with pytest.raises(ValueError):
        evalkit.embed_project(imgs[:2], st_model)


def test_pca_recovers_dominant_axis():
    rng = np.random.default_rng(3)
    t = rng.standard_normal(50)
    vecs = np.stack([3 * t, 0.1 * rng.standard_normal(50), np.zeros(50)], 1)
    pts = evalkit.pca_2d(vecs)
    assert abs(np.corrcoef(pts[:, 0], t)[0, 1]) > 0.99


def test_mean_pairwise_distance():
    pts = np.array([[0.0, 0.0], [3.0, 4.0], [0.0, 0.0]])
    assert evalkit.mean_pairwise_distance(pts) == pytest.approx((5 + 5 + 0) / 3)


def test_metrics_report(tmp_path):
    gt = np.zeros((6, 6), int)
    gt[:3, :3] = 1
    rows = [("a", "baseline", gt, gt), ("a", "s3tta", np.zeros_like(gt), gt)]
    summary = evalkit.write_metrics_report(tmp_path / "m.csv", rows)
    text = (tmp_path / "m.csv").read_text().splitlines()
    assert text[0].startswith("# matching")
    assert text[1] == "image_id,method,tau,f1,dice,jaccard"
    assert "a,baseline,0.5,100.0,100.0,100.0" in text
    assert "ALL,s3tta,0.5,0.0,0.0,0.0" in text
    assert {(r["method"], r["tau"]) for r in summary} == {
        (m, t) for m in ("baseline", "s3tta") for t in evalkit.DEFAULT_THRESHOLDS
    }
