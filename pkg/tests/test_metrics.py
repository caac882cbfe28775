import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import ndimage

from vffc.data import D4, d4_apply
from vffc.metrics import (ConfusionCounts, binarize, evaluate_maps, f_beta, f_beta_pr, psnr,
                          pseudo_fmeasure, skeletonize)

seeds = st.integers(0, 2**32 - 1)


# ---------------------------------------------------------------- loop oracles

def count_loops(pred, gt):
    tp = fp = fn = tn = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            a, b = pred[i, j] == 1, gt[i, j] == 1
            tp += a and b
            fp += a and not b
            fn += b and not a
            tn += not a and not b
    return tp, fp, fn, tn


def f_beta_loops(pred, gt, beta=0.5):
    tp, fp, fn, _ = count_loops(pred, gt)
    if tp == 0:
        return 0.0
    p, r = tp / (tp + fp), tp / (tp + fn)
    return (1 + beta * beta) * p * r / (beta * beta * p + r)


def psnr_loops(pred, gt):
    err = sum((float(pred[i, j]) - float(gt[i, j])) ** 2
              for i in range(pred.shape[0]) for j in range(pred.shape[1]))
    return math.inf if err == 0 else 10 * math.log10(pred.size / err)


def zhang_suen_loops(img):
    """Pixel-by-pixel thinning with the classic two sub-iterations."""
    h, w = img.shape
    im = [[int(img[i][j]) for j in range(w)] for i in range(h)]
    get = lambda i, j: im[i][j] if 0 <= i < h and 0 <= j < w else 0
    changed = True
    while changed:
        changed = False
        for step in (0, 1):
            kill = []
            for i in range(h):
                for j in range(w):
                    if not im[i][j]:
                        continue
                    p = [get(i - 1, j), get(i - 1, j + 1), get(i, j + 1), get(i + 1, j + 1),
                         get(i + 1, j), get(i + 1, j - 1), get(i, j - 1), get(i - 1, j - 1)]
                    b = sum(p)
                    a = sum(p[k] == 0 and p[(k + 1) % 8] == 1 for k in range(8))
                    p2, p4, p6, p8 = p[0], p[2], p[4], p[6]
                    if step == 0:
                        ok = p2 * p4 * p6 == 0 and p4 * p6 * p8 == 0
                    else:
                        ok = p2 * p4 * p8 == 0 and p2 * p6 * p8 == 0
                    if 2 <= b <= 6 and a == 1 and ok:
                        kill.append((i, j))
            for i, j in kill:
                im[i][j] = 0
            changed = changed or bool(kill)
    return np.array(im, dtype=float)


def pfm_loops(pred, gt):
    skel = zhang_suen_loops(gt)
    tp, fp, _, _ = count_loops(pred, gt)
    stp, _, sfn, _ = count_loops(pred, skel)
    if tp == 0 or stp == 0:
        return 0.0
    p, r = tp / (tp + fp), stp / (stp + sfn)
    return 2 * p * r / (p + r)


def random_pair(seed, shape=(32, 32)):
    rng = np.random.default_rng(seed)
    gt = ndimage.binary_dilation(rng.random(shape) < 0.03, iterations=int(rng.integers(1, 3)))
    flip = rng.random(shape) < rng.uniform(0, 0.3)
    return (gt ^ flip).astype(float), gt.astype(float)


def test_metrics_match_loop_oracles_on_100_pairs():
    for seed in range(100):
        pred, gt = random_pair(seed)
        c = ConfusionCounts.from_maps(pred, gt)
        assert (c.tp, c.fp, c.fn, c.tn) == count_loops(pred, gt)
        assert f_beta(c) == pytest.approx(f_beta_loops(pred, gt), rel=1e-15, abs=0)
        assert psnr(pred, gt) == pytest.approx(psnr_loops(pred, gt), rel=1e-14)
        assert np.array_equal(skeletonize(gt), zhang_suen_loops(gt))
        assert pseudo_fmeasure(pred, gt) == pytest.approx(pfm_loops(pred, gt), rel=1e-15, abs=0)


# ---------------------------------------------------------------- examples

def test_binarize_examples():
    assert np.all(binarize(np.full((3, 3), 0.5)) == 1)
    assert np.all(binarize(np.full((3, 3), 0.49)) == 0)
    m = np.random.default_rng(0).random((8, 8))
    assert np.array_equal(binarize(binarize(m)), binarize(m))


def test_f_beta_examples():
    assert f_beta_pr(0.8, 0.5) == pytest.approx(0.714285714285714, abs=1e-12)
    for beta in (0.25, 0.5, 1.0, 2.0):
        assert f_beta_pr(0.625, 0.625, beta) == pytest.approx(0.625, rel=1e-15)
    assert f_beta(ConfusionCounts(0, 5, 5, 10)) == 0.0
    # 8 of 10 predictions right, half of 16 inks found
    assert f_beta(ConfusionCounts(8, 2, 8, 82)) == pytest.approx(0.714285714285714, abs=1e-12)
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_f_beta_monotone_in_tp(tp, fp, fn):
    assert f_beta(ConfusionCounts(tp + 1, fp, fn, 0)) >= f_beta(ConfusionCounts(tp, fp, fn, 0))


def test_counts_merge_is_sum():
    pairs = [random_pair(s) for s in range(4)]
    merged = sum((ConfusionCounts.from_maps(p, g) for p, g in pairs), ConfusionCounts(0, 0, 0, 0))
    whole = ConfusionCounts.from_maps(np.concatenate([p for p, _ in pairs]), np.concatenate([g for _, g in pairs]))
    assert merged == whole and merged.total == 4 * 32 * 32


def test_psnr_examples():
    gt = np.zeros((10, 10))
    assert psnr(gt, gt) == math.inf
    pred = gt.copy()
    pred[3, 4] = 1
    assert psnr(pred, gt) == pytest.approx(20.0, rel=1e-14)
    assert psnr(1 - gt, gt) == 0.0
    with pytest.raises(ValueError):
        psnr(gt, gt[:5])


def test_skeleton_examples():
    line = np.zeros((7, 9))
    line[3, 1:8] = 1
    assert np.array_equal(skeletonize(line), line)
    assert not skeletonize(np.zeros((5, 5))).any()
    sq = np.zeros((9, 9))
    sq[2:7, 2:7] = 1
    sk = skeletonize(sq)
    assert 1 <= sk.sum() <= 5
    assert ndimage.label(sk, structure=np.ones((3, 3)))[1] == 1
    assert np.all(sk <= sq)


@given(seeds)
def test_skeleton_idempotent(seed):
    _, gt = random_pair(seed, (24, 24))
    sk = skeletonize(gt)
    assert np.array_equal(skeletonize(sk), sk)
    assert np.all(sk <= gt)


def test_pfm_examples():
    gt = np.zeros((10, 10))
    gt[2:5, 1:9] = 1  # 3-px-wide bar, skeleton on its middle row
    assert pseudo_fmeasure(gt, gt) == 1.0
    skel = skeletonize(gt)
    half = np.zeros((10, 10))
    half[2:4, 1:9] = 1  # upper two rows: contains the skeleton, about half the bar
    assert np.all(skel <= half)
    assert pseudo_fmeasure(half, gt) == 1.0
    assert f_beta(ConfusionCounts.from_maps(half, gt)) < 1.0
    assert pseudo_fmeasure(np.zeros((10, 10)), gt) == 0.0


@given(seeds, st.sampled_from(D4))
def test_metrics_d4_invariant(seed, g):
    pred, gt = random_pair(seed, (24, 24))
    a = evaluate_maps(pred, gt)
    b = evaluate_maps(d4_apply(pred, g), d4_apply(gt, g))
    assert a["f_beta"] == b["f_beta"] and a["psnr"] == b["psnr"]


@given(seeds, st.sampled_from(D4))
def test_pfm_d4_invariant(seed, g):
    # Zhang-Suen thinning is orientation dependent, so this does not hold in general
    pred, gt = random_pair(seed, (24, 24))
    assert pseudo_fmeasure(pred, gt) == pseudo_fmeasure(d4_apply(pred, g), d4_apply(gt, g))
