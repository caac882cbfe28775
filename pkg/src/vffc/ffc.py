"""Fast Fourier Convolution variants.

* ``sffc``  - spatial FFC on (N, H, W, C) with a 2D spectral transform.
* ``stffc`` - spatio-temporal FFC on (N, D, H, W, C): 3D branch convolutions,
  but the spectral transform folds depth into channels and runs a 2D FFT
  over (H, W).  Its pointwise convolution therefore depends on D.
* ``vffc``  - volumetric FFC: 3D convolutions and a 3D spectral transform.

Each layer splits channels into a local part (C_l) and a global part (C_g):

    local  = conv(conv(x_l))          + conv_g2l(x_g)
    global = conv(x_g) + ST(x_g)      + conv_l2g(x_l)
    out    = concat(relu(bn(local)), relu(bn(global)))
"""
from __future__ import annotations

import numpy as np

from . import spectral
from .nn import BatchNorm, Conv, Module, drop_path
from .tensor import Tensor, concat, permute, relu, reshape, split

KINDS = ("vffc", "stffc", "sffc")


class SpectralTransform(Module):
    """rFFT -> stack re||im on channels -> 1x1 conv, BN, ReLU -> irFFT.

    ``dims`` is 3 (volumetric) or 2 (spatial).  With ``fold_depth`` the input
    is (N, D, H, W, C) and depth is folded into channels before a 2D FFT.
    ``bypass_norm`` / ``bypass_relu`` are test hooks exposing the linear
    spectral algebra.
    """

    def __init__(self, channels: int, rng: np.random.Generator, dims: int = 3,
                 fold_depth: int | None = None):
        if channels < 1:
            raise ValueError("spectral transform needs at least one channel")
        self.dims = dims
        self.fold_depth = fold_depth
        inner = channels * (fold_depth or 1)
        self.conv = Conv(2 * inner, 2 * inner, (1,) * dims, rng)
        self.bn = BatchNorm(2 * inner)
        self.bypass_norm = False
        self.bypass_relu = False

    def forward(self, x: Tensor) -> Tensor:
        if self.fold_depth is not None:
            n, d, h, w, c = x.shape
            if d != self.fold_depth:
                raise ValueError(f"stFFC built for depth {self.fold_depth}, got {d}")
            folded = reshape(permute(x, (0, 2, 3, 1, 4)), (n, h, w, d * c))
            y = self._spectral(folded)
            return permute(reshape(y, (n, h, w, d, c)), (0, 3, 1, 2, 4))
        return self._spectral(x)

    def _spectral(self, x: Tensor) -> Tensor:
        c = x.shape[-1]
        z = spectral.rfftn(x, self.dims)
        y = self.conv(concat([z.re, z.im], -1))
        if not self.bypass_norm:
            y = self.bn(y)
        if not self.bypass_relu:
            y = relu(y)
        re, im = split(y, -1, [c, c])
        return spectral.irfftn(spectral.ComplexSpectrum(re, im, z.original_w), self.dims)


class FFC(Module):
    """One FFC layer mapping (..., C_l + C_g) to the same shape."""

    def __init__(self, channels: int, rng: np.random.Generator, kind: str = "vffc",
                 global_channels: int | None = None, depth: int | None = None):
        if kind not in KINDS:
            raise ValueError(f"unknown FFC kind {kind!r}")
        cg = channels // 2 if global_channels is None else global_channels
        cl = channels - cg
        if cl < 1 or cg < 1:
            raise ValueError(f"both branches need channels, got C_l={cl}, C_g={cg}")
        if kind == "stffc" and depth is None:
            raise ValueError("stffc needs the input depth to size its spectral conv")
        self.kind = kind
        self.split_sizes = (cl, cg)
        k = (3, 3) if kind == "sffc" else (3, 3, 3)
        self.l2l_a = Conv(cl, cl, k, rng)
        self.l2l_b = Conv(cl, cl, k, rng)
        self.g2l = Conv(cg, cl, k, rng)
        self.l2g = Conv(cl, cg, k, rng)
        self.g2g = Conv(cg, cg, k, rng)
        if kind == "vffc":
            self.spectral = SpectralTransform(cg, rng, dims=3)
        elif kind == "sffc":
            self.spectral = SpectralTransform(cg, rng, dims=2)
        else:
            self.spectral = SpectralTransform(cg, rng, dims=2, fold_depth=depth)
        self.bn_l = BatchNorm(cl)
        self.bn_g = BatchNorm(cg)
        self.bypass_output_norm = False

    def branches(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Pre-normalisation (local, global) outputs after cross-fusion."""
        if x.shape[-1] != sum(self.split_sizes):
            raise ValueError(f"expected {sum(self.split_sizes)} channels, got {x.shape[-1]}")
        x_l, x_g = split(x, -1, list(self.split_sizes))
        local = self.l2l_b(self.l2l_a(x_l)) + self.g2l(x_g)
        glob = self.g2g(x_g) + self.spectral(x_g) + self.l2g(x_l)
        return local, glob

    def forward(self, x: Tensor) -> Tensor:
        local, glob = self.branches(x)
        if self.bypass_output_norm:
            return concat([local, glob], -1)
        return concat([relu(self.bn_l(local)), relu(self.bn_g(glob))], -1)


class FFCResidualBlock(Module):
    """x + drop_path(ffc(ffc(x)))."""

    def __init__(self, channels: int, rng: np.random.Generator, kind: str = "vffc",
                 drop_path_rate: float = 0.1, depth: int | None = None,
                 global_channels: int | None = None):
        self.ffc1 = FFC(channels, rng, kind, global_channels, depth)
        self.ffc2 = FFC(channels, rng, kind, global_channels, depth)
        self.drop_path_rate = drop_path_rate
        self.rng = np.random.default_rng(0)
        self.forced_mask: np.ndarray | None = None

    def forward(self, x: Tensor) -> Tensor:
        branch = self.ffc2(self.ffc1(x))
        return x + drop_path(branch, self.drop_path_rate, self.training, self.rng,
                             mask=self.forced_mask if self.training else None)


# functional entry points ------------------------------------------------------

def spectral_transform_3d(x_g: Tensor, p: SpectralTransform) -> Tensor:
    return p(x_g)


def vffc_forward(x: Tensor, p: FFC) -> Tensor:
    if p.kind != "vffc" or x.ndim != 5:
        raise ValueError("vffc_forward needs a vffc layer and (N, D, H, W, C) input")
    return p(x)


def stffc_forward(x: Tensor, p: FFC) -> Tensor:
    if p.kind != "stffc" or x.ndim != 5:
        raise ValueError("stffc_forward needs an stffc layer and (N, D, H, W, C) input")
    return p(x)


def sffc_forward(x: Tensor, p: FFC) -> Tensor:
    if p.kind != "sffc" or x.ndim != 4:
        raise ValueError("sffc_forward needs an sffc layer and (N, H, W, C) input")
    return p(x)


def vffc_residual_block(x: Tensor, p: FFCResidualBlock) -> Tensor:
    return p(x)


def copy_as_spatial(src: FFC, dst: FFC) -> None:
    """Load ``dst`` (sffc) with the centre depth slice of ``src`` (vffc/stffc).

    Makes the D=1 reduction exact when ``src`` kernels only carry mass on
    their centre depth slice.
    """
    sp = src.named_parameters()
    for name, p in dst.named_parameters().items():
        w = sp[name].data
        if w.ndim == 5 and p.ndim == 4:
            w = w[:, :, w.shape[2] // 2]
        p.data = np.array(w.reshape(p.shape))
    sb = src.named_buffers()
    for name, b in dst.named_buffers().items():
        b[...] = sb[name]
