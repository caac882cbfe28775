"""Dice and weighted BCE on probability maps."""
from __future__ import annotations

import numpy as np

from .tensor import LOG_EPS, Tensor, as_tensor, clamp, log, scale

LOSS_MODES = ("both", "dice", "wbce")


def dice_loss(p: Tensor, g, eps: float = 1e-6) -> Tensor:
    """1 - (2 sum(p g) + eps) / (sum(p^2) + sum(g^2) + eps)."""
    g = as_tensor(g)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    num = scale((p * g).sum(), 2.0) + eps
    den = (p * p).sum() + float((g.data * g.data).sum()) + eps
    return 1.0 - num / den


def wbce_loss(p: Tensor, g, w: float = 1.0, verbatim: bool = False) -> Tensor:
    """Binary cross-entropy with the ink (positive) term weighted by ``w``.

    ``verbatim`` multiplies both terms by ``w`` instead, which only rescales
    plain BCE; kept for comparison.
    """
    g = as_tensor(g)
    if p.shape != g.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {g.shape}")
    pc = clamp(p, LOG_EPS, 1.0 - LOG_EPS)
    pos = g * log(pc)
    neg = (1.0 - g) * log(1.0 - pc)
    if verbatim:
        total = scale(pos + neg, w)
    else:
        total = scale(pos, w) + neg
    return scale(total.sum(), -1.0 / p.size)


def total_loss(p: Tensor, g, w: float = 1.0, eps: float = 1e-6, mode: str = "both",
               verbatim_wbce: bool = False) -> Tensor:
    if mode == "both":
        return dice_loss(p, g, eps) + wbce_loss(p, g, w, verbatim_wbce)
    if mode == "dice":
        return dice_loss(p, g, eps)
    if mode == "wbce":
        return wbce_loss(p, g, w, verbatim_wbce)
    raise ValueError(f"loss mode must be one of {LOSS_MODES}, got {mode!r}")


def loss_value(p: np.ndarray, g: np.ndarray, **kw) -> float:
    return total_loss(Tensor(p), Tensor(g), **kw).item()
