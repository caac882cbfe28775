"""Binarisation, F-beta, pseudo-F-measure, PSNR and Zhang-Suen thinning."""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np

PSNR_IDENTICAL = float("inf")


def binarize(m: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(m) >= threshold).astype(np.float64)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("negative confusion count")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_maps(cls, pred: np.ndarray, gt: np.ndarray) -> "ConfusionCounts":
        pred = np.asarray(pred) > 0.5
        gt = np.asarray(gt) > 0.5
        if pred.shape != gt.shape:
            raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
        tp = int(np.count_nonzero(pred & gt))
        fp = int(np.count_nonzero(pred & ~gt))
        fn = int(np.count_nonzero(~pred & gt))
        return cls(tp, fp, fn, pred.size - tp - fp - fn)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.fn + other.fn, self.tn + other.tn)


def f_beta_pr(p, r, beta=0.5) -> float:
    p, r, b2 = Fraction(p), Fraction(r), Fraction(beta) ** 2
    if p == 0 and r == 0:
        return 0.0
    return float((1 + b2) * p * r / (b2 * p + r))


def f_beta(c: ConfusionCounts, beta: float = 0.5) -> float:
    """(1 + b^2) p r / (b^2 p + r), evaluated exactly; 0 when tp == 0."""
    if c.tp == 0:
        return 0.0
    p = Fraction(c.tp, c.tp + c.fp)
    r = Fraction(c.tp, c.tp + c.fn)
    return f_beta_pr(p, r, beta)


def psnr(pred: np.ndarray, gt: np.ndarray) -> float:
    """10 log10(1 / MSE) with peak 1; ``inf`` for identical maps."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0:
        return PSNR_IDENTICAL
    return 10.0 * np.log10(1.0 / mse)


def _neighbours(img: np.ndarray):
    """P2..P9 clockwise from north, with zero padding."""
    p = np.pad(img, 1)
    h, w = img.shape
    c = lambda dy, dx: p[1 + dy:1 + dy + h, 1 + dx:1 + dx + w]
    return [c(-1, 0), c(-1, 1), c(0, 1), c(1, 1), c(1, 0), c(1, -1), c(0, -1), c(-1, -1)]


def skeletonize(mask: np.ndarray) -> np.ndarray:
    """Zhang-Suen thinning to a one-pixel-wide, 8-connected skeleton."""
    img = (np.asarray(mask) > 0.5).astype(np.uint8)
    while True:
        changed = False
        for first in (True, False):
            nb = _neighbours(img)
            p2, p3, p4, p5, p6, p7, p8, p9 = nb
            b = sum(n.astype(np.int32) for n in nb)
            seq = nb + [p2]
            a = sum(((seq[i] == 0) & (seq[i + 1] == 1)).astype(np.int32) for i in range(8))
            if first:
                c1 = (p2 * p4 * p6) == 0
                c2 = (p4 * p6 * p8) == 0
            else:
                c1 = (p2 * p4 * p8) == 0
                c2 = (p2 * p6 * p8) == 0
            kill = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
            if kill.any():
                img = img.copy()
                img[kill] = 0
                changed = True
        if not changed:
            return img.astype(np.float64)


def pseudo_fmeasure(pred: np.ndarray, gt: np.ndarray) -> float:
    """Harmonic mean of precision and skeleton-based pseudo-recall."""
    pred = np.asarray(pred) > 0.5
    gt = np.asarray(gt) > 0.5
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    tp = int(np.count_nonzero(pred & gt))
    npred = int(np.count_nonzero(pred))
    skel = skeletonize(gt) > 0.5
    nskel = int(np.count_nonzero(skel))
    if tp == 0 or nskel == 0:
        return 0.0
    precision = Fraction(tp, npred)
    precall = Fraction(int(np.count_nonzero(pred & skel)), nskel)
    if precall == 0:
        return 0.0
    return float(2 * precision * precall / (precision + precall))


def evaluate_maps(pred: np.ndarray, gt: np.ndarray, beta: float = 0.5) -> dict[str, float]:
    return {
        "f_beta": f_beta(ConfusionCounts.from_maps(pred, gt), beta),
        "pfm": pseudo_fmeasure(pred, gt),
        "psnr": psnr(pred, gt),
    }
