"""Differentiable neural building blocks: convolution, batch norm, bilinear
upsampling, depth collapse, DropPath and Channel Dropout, plus a minimal
``Module`` container for named parameters.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor, make, mean


# ---------------------------------------------------------------- modules

class Module:
    """Parameter container.

    Attributes that are ``Tensor`` with ``requires_grad`` are parameters,
    ``np.ndarray`` attributes are buffers (running statistics), and nested
    modules (or lists of them) are traversed in attribute order.
    """

    training: bool = True

    def _children(self) -> Iterator[tuple[str, object]]:
        for name, value in vars(self).items():
            if isinstance(value, (list, tuple)):
                for i, v in enumerate(value):
                    if isinstance(v, Module):
                        yield f"{name}.{i}", v
            else:
                yield name, value

    def named_parameters(self, prefix: str = "") -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for name, value in self._children():
            if isinstance(value, Tensor) and value.requires_grad:
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_parameters(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for name, value in self._children():
            if isinstance(value, np.ndarray):
                out[prefix + name] = value
            elif isinstance(value, Module):
                out.update(value.named_buffers(f"{prefix}{name}."))
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {k: v.data for k, v in self.named_parameters().items()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        buffers = self.named_buffers()
        expected = set(params) | set(buffers)
        if set(state) != expected:
            missing = sorted(expected - set(state))
            extra = sorted(set(state) - expected)
            raise KeyError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for k, p in params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)
        for k, b in buffers.items():
            b[...] = state[k]

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


# ---------------------------------------------------------------- convolution

@dataclass
class ConvParams:
    """Weights (out_C, in_C, *kernel), bias (out_C,), per-axis stride/padding."""

    weight: Tensor
    bias: Tensor
    stride: tuple[int, ...]
    padding: tuple[int, ...]

    def __post_init__(self):
        k = self.weight.shape[2:]
        if len(self.stride) != len(k) or len(self.padding) != len(k):
            raise ValueError("stride/padding rank does not match kernel rank")
        if self.weight.shape[1] * int(np.prod(k)) <= 0:
            raise ValueError("empty fan-in")

    @property
    def kernel(self) -> tuple[int, ...]:
        return self.weight.shape[2:]


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    fan_in = int(np.prod(shape[1:]))
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def conv_nd(x: Tensor, p: ConvParams) -> Tensor:
    """Cross-correlation over the spatial axes between batch and channels."""
    w, b = p.weight, p.bias
    k = p.kernel
    nsp = len(k)
    if x.ndim != nsp + 2:
        raise ValueError(f"expected rank {nsp + 2} input, got shape {x.shape}")
    cin = x.shape[-1]
    if w.shape[1] != cin:
        raise ValueError(f"channel mismatch: input has {cin}, weights expect {w.shape[1]}")
    pad = [(0, 0)] + [(q, q) for q in p.padding] + [(0, 0)]
    xp = np.pad(x.data, pad) if any(p.padding) else x.data
    insp = xp.shape[1:-1]
    outsp = tuple((n - kk) // s + 1 for n, kk, s in zip(insp, k, p.stride))
    if any(o <= 0 for o in outsp):
        raise ValueError(f"non-positive output size {outsp} for input {x.shape}")
    cout = w.shape[0]
    kvol = int(np.prod(k))
    offsets = list(itertools.product(*[range(kk) for kk in k]))
    # im2col: (P, C_in * prod(k)) with (C_in, k...) ordering to match the weight layout
    view = sliding_window_view(xp, k, axis=tuple(range(1, 1 + nsp)))
    view = view[(slice(None),) + tuple(slice(0, s * (n - 1) + 1, s) for s, n in zip(p.stride, outsp))]
    cols = view.reshape(-1, cin * kvol)
    wmat = w.data.reshape(cout, cin * kvol)
    out = (cols @ wmat.T).reshape((x.shape[0],) + outsp + (cout,))
    out += b.data

    def window(off):
        return (slice(None),) + tuple(
            slice(o, o + s * (n - 1) + 1, s) for o, s, n in zip(off, p.stride, outsp)
        ) + (slice(None),)

    def backward(g):
        g2 = g.reshape(-1, cout)
        gx = None
        if x.requires_grad:
            # (k..., C_in) ordering keeps each offset's channel block contiguous
            wk = np.moveaxis(w.data, 1, -1).reshape(cout, kvol * cin)
            gcols = (g2 @ wk).reshape((x.shape[0],) + outsp + (kvol, cin))
            gxp = np.zeros(xp.shape)
            for j, off in enumerate(offsets):
                gxp[window(off)] += gcols[..., j, :]
            crop = (slice(None),) + tuple(slice(q, q + n) for q, n in zip(p.padding, x.shape[1:-1])) + (slice(None),)
            gx = gxp[crop]
        gw = (g2.T @ cols).reshape(w.shape) if w.requires_grad else None
        gb = g2.sum(axis=0) if b.requires_grad else None
        return gx, gw, gb

    return make(out, (x, w, b), backward, f"conv{nsp}d")


def conv3d(x: Tensor, p: ConvParams) -> Tensor:
    if len(p.kernel) != 3:
        raise ValueError("conv3d needs a 3D kernel")
    return conv_nd(x, p)


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    if len(p.kernel) != 2:
        raise ValueError("conv2d needs a 2D kernel")
    return conv_nd(x, p)


class Conv(Module):
    """Convolution layer; ``kernel`` length picks 2D or 3D."""

    def __init__(self, in_c: int, out_c: int, kernel, rng: np.random.Generator,
                 stride=1, padding="same", bias: bool = True):
        kernel = tuple(kernel)
        nsp = len(kernel)
        stride = (stride,) * nsp if isinstance(stride, int) else tuple(stride)
        if padding == "same":
            if any(kk % 2 == 0 for kk in kernel):
                raise ValueError("same padding needs odd kernel sizes")
            padding = tuple(kk // 2 for kk in kernel)
        elif isinstance(padding, int):
            padding = (padding,) * nsp
        self.weight = Tensor(kaiming_uniform(rng, (out_c, in_c) + kernel), requires_grad=True)
        self.bias = Tensor(np.zeros(out_c), requires_grad=bias)
        self.stride = stride
        self.padding = tuple(padding)

    @property
    def params(self) -> ConvParams:
        return ConvParams(self.weight, self.bias, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        return conv_nd(x, self.params)


# ---------------------------------------------------------------- batch norm

@dataclass
class BatchNormParams:
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


def batch_norm(x: Tensor, p: BatchNormParams, training: bool) -> Tensor:
    """Per-channel normalisation over every axis but the last.

    Training mode uses biased batch statistics and updates the running
    estimates in place (unbiased variance), eval mode uses the running ones.
    """
    axes = tuple(range(x.ndim - 1))
    count = x.size // x.shape[-1]
    gamma, beta = p.gamma, p.beta
    if training:
        if count < 2:
            raise ValueError("batch norm over a single element per channel")
        mu = x.data.mean(axis=axes)
        xc = x.data - mu
        var = (xc * xc).mean(axis=axes)
        m = p.momentum
        p.running_mean *= 1 - m
        p.running_mean += m * mu
        p.running_var *= 1 - m
        p.running_var += m * var * count / (count - 1)
    else:
        xc = x.data - p.running_mean
        var = p.running_var
    inv = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data

    def backward(g):
        gg = (g * xhat).sum(axis=axes)
        gb = g.sum(axis=axes)
        gxhat = g * gamma.data
        if training:
            gx = inv / count * (count * gxhat - gxhat.sum(axis=axes) - xhat * (gxhat * xhat).sum(axis=axes))
        else:
            gx = gxhat * inv
        return gx, gg, gb

    return make(out, (x, gamma, beta), backward, "batch_norm")


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    @property
    def params(self) -> BatchNormParams:
        return BatchNormParams(self.gamma, self.beta, self.running_mean,
                               self.running_var, self.momentum, self.eps)

    def forward(self, x: Tensor) -> Tensor:
        return batch_norm(x, self.params, self.training)


# ---------------------------------------------------------------- resampling

def _up2_matrix(n: int) -> np.ndarray:
    """(2n, n) align-corners-false linear interpolation weights."""
    m = np.zeros((2 * n, n))
    for i in range(2 * n):
        src = max((i + 0.5) / 2 - 0.5, 0.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, n - 1)
        lam = src - i0
        m[i, i0] += 1 - lam
        m[i, i1] += lam
    return m


def bilinear_up2(x: Tensor) -> Tensor:
    """2-fold bilinear upsampling of (N, H, W, C)."""
    if x.ndim != 4:
        raise ValueError("bilinear_up2 expects (N, H, W, C)")
    uh = _up2_matrix(x.shape[1])
    uw = _up2_matrix(x.shape[2])
    out = np.einsum("ih,nhwc,jw->nijc", uh, x.data, uw, optimize=True)
    return make(out, (x,), lambda g: (np.einsum("ih,nijc,jw->nhwc", uh, g, uw, optimize=True),),
                "bilinear_up2")


def depth_mean(x: Tensor) -> Tensor:
    """Average (N, D, H, W, C) over depth."""
    if x.ndim != 5:
        raise ValueError("depth_mean expects (N, D, H, W, C)")
    return mean(x, 1)


# ---------------------------------------------------------------- regularisers

def apply_mask(x: Tensor, mask: np.ndarray) -> Tensor:
    """Multiply by a constant array broadcast against ``x``."""
    mask = np.asarray(mask, dtype=np.float64)
    return make(x.data * mask, (x,), lambda g: (g * mask,), "mask")


def drop_path_mask(n: int, ndim: int, rate: float, rng: np.random.Generator) -> np.ndarray:
    keep = rng.random(n) >= rate
    return (keep / (1.0 - rate)).reshape((n,) + (1,) * (ndim - 1))


def drop_path(x: Tensor, rate: float, training: bool, rng: np.random.Generator | None = None,
              mask: np.ndarray | None = None) -> Tensor:
    """Per-sample stochastic depth on a residual branch output.

    ``mask`` freezes the per-sample keep factors (tests, replay).
    """
    if not 0 <= rate < 1:
        raise ValueError(f"drop path rate must be in [0, 1), got {rate}")
    if not training or (rate == 0 and mask is None):
        return x
    if mask is None:
        mask = drop_path_mask(x.shape[0], x.ndim, rate, rng)
    return apply_mask(x, mask)


def channel_dropout_mask(shape: tuple[int, ...], rate: float, max_fraction: float,
                         rng: np.random.Generator, axis: int = -1) -> np.ndarray:
    ax = axis % len(shape)
    n, c = shape[0], shape[ax]
    mshape = [1] * len(shape)
    mshape[0], mshape[ax] = n, c
    mask = np.ones((n, c))
    limit = int(np.floor(max_fraction * c))
    for i in range(n):
        if limit >= 1 and rng.random() < rate:
            k = int(rng.integers(1, limit + 1))
            mask[i, rng.choice(c, size=k, replace=False)] = 0.0
    return mask.reshape(mshape)


def channel_dropout(x, rate: float, max_fraction: float, training: bool,
                    rng: np.random.Generator | None = None, axis: int = -1,
                    mask: np.ndarray | None = None):
    """Zero a random subset of whole channels per sample, without rescaling.

    With probability ``rate`` a sample loses between 1 and
    ``floor(max_fraction * C)`` channels.  Accepts a Tensor or an ndarray
    (data augmentation runs on plain arrays).
    """
    if not 0 <= rate < 1:
        raise ValueError(f"channel dropout rate must be in [0, 1), got {rate}")
    if not 0 < max_fraction <= 1:
        raise ValueError(f"max_fraction must be in (0, 1], got {max_fraction}")
    shape = x.shape
    if shape[axis] == 0:
        raise ValueError("no channels to drop")
    if not training or (rate == 0 and mask is None):
        return x
    if mask is None:
        mask = channel_dropout_mask(shape, rate, max_fraction, rng, axis)
    if isinstance(x, Tensor):
        return apply_mask(x, mask)
    return x * mask
