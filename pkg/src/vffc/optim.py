"""AdamW with decoupled weight decay and the one-cycle learning-rate schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import NonFiniteError, Tensor


@dataclass
class AdamWHyper:
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    eps: float = 1e-8


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
               state: dict[str, AdamState], hyper: AdamWHyper, step: int,
               lr: float | None = None) -> dict[str, np.ndarray]:
    """One bias-corrected AdamW update; returns new parameter arrays.

    ``state`` is updated in place (missing entries start at zero).
    """
    if step < 1:
        raise ValueError("step counts from 1")
    lr = hyper.lr if lr is None else lr
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1 ** step
    c2 = 1.0 - b2 ** step
    out = {}
    for name, theta in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        if not np.isfinite(g).all():
            raise NonFiniteError(f"non-finite gradient for {name}")
        st = state.get(name)
        if st is None:
            st = state[name] = AdamState(np.zeros_like(theta), np.zeros_like(theta))
        st.m = b1 * st.m + (1.0 - b1) * g
        st.v = b2 * st.v + (1.0 - b2) * g * g
        decayed = theta - lr * hyper.weight_decay * theta
        out[name] = decayed - lr * (st.m / c1) / (np.sqrt(st.v / c2) + hyper.eps)
    return out


class AdamW:
    """Stateful wrapper updating a module's named parameters in place."""

    def __init__(self, named: dict[str, Tensor], hyper: AdamWHyper | None = None):
        self.named = named
        self.hyper = hyper or AdamWHyper()
        self.state: dict[str, AdamState] = {}
        self.steps = 0

    def step(self, lr: float | None = None) -> None:
        self.steps += 1
        params = {k: t.data for k, t in self.named.items()}
        grads = {k: t.grad for k, t in self.named.items() if t.grad is not None}
        new = adamw_step(params, grads, self.state, self.hyper, self.steps, lr)
        for k, t in self.named.items():
            t.data = new[k]

    def zero_grad(self) -> None:
        for t in self.named.values():
            t.grad = None


def onecycle_lr(step: float, total_steps: float, lr_max: float = 0.003, pct_start: float = 0.3,
                div: float = 25.0, final_div: float = 1e4) -> float:
    """Cosine warm-up from lr_max/div to lr_max, then cosine decay to lr_max/final_div."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    start, floor = lr_max / div, lr_max / final_div
    warm = pct_start * total_steps

    def cos_interp(a, b, t):
        return b + (a - b) * 0.5 * (1 + math.cos(math.pi * t))

    if step <= warm and warm > 0:
        return cos_interp(start, lr_max, step / warm)
    rest = total_steps - warm
    return cos_interp(lr_max, floor, (step - warm) / rest if rest > 0 else 1.0)
