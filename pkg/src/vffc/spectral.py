"""Real 3D (and 2D) FFTs with exact adjoints, plus a direct-sum DFT oracle.

Convention: the forward transform is unscaled and the inverse divides by the
number of transformed points, so ``irfft3(rfft3(x)) == x``.  The half
spectrum keeps ``W // 2 + 1`` bins on the last transformed axis.  (The
standard real-FFT width; ``W/2`` is sometimes quoted informally.)

The 1D kernel is a recursive mixed-radix decimation-in-time FFT vectorised
over all other axes.  Small prime lengths use a dense DFT matrix, larger
primes fall back to Bluestein's chirp-z algorithm on a power-of-two length.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .tensor import Tensor, make

DENSE_PRIME_LIMIT = 32
REFERENCE_CAP = 4096


# ---------------------------------------------------------------- 1D kernel

@lru_cache(maxsize=None)
def _smallest_factor(n: int) -> int:
    if n % 2 == 0:
        return 2
    f = 3
    while f * f <= n:
        if n % f == 0:
            return f
        f += 2
    return n


@lru_cache(maxsize=None)
def _dft_matrix(n: int, sign: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(sign * 2j * np.pi * np.outer(k, k) / n)


@lru_cache(maxsize=None)
def _twiddles(p: int, m: int, sign: int) -> np.ndarray:
    return np.exp(sign * 2j * np.pi * np.outer(np.arange(p), np.arange(m)) / (p * m))


@lru_cache(maxsize=None)
def _bluestein_setup(n: int, sign: int):
    m = 1
    while m < 2 * n - 1:
        m *= 2
    k = np.arange(n)
    chirp = np.exp(sign * 1j * np.pi * (k * k % (2 * n)) / n)
    b = np.zeros(m, dtype=complex)
    b[:n] = np.conj(chirp)
    b[m - n + 1:] = np.conj(chirp[1:])[::-1]
    return m, chirp, _fft_last(b, -1)


def _fft_last(x: np.ndarray, sign: int) -> np.ndarray:
    """Unnormalised DFT along the last axis, kernel exp(sign*2*pi*i*k*n/N)."""
    n = x.shape[-1]
    if n == 1:
        return x.astype(complex)
    p = _smallest_factor(n)
    if p == n:
        if n <= DENSE_PRIME_LIMIT:
            return x @ _dft_matrix(n, sign)
        return _bluestein(x, sign)
    m = n // p
    # x[..., j + p*i] -> sub-sequence j, position i
    sub = np.swapaxes(x.reshape(*x.shape[:-1], m, p), -1, -2)
    y = _fft_last(sub, sign) * _twiddles(p, m, sign)
    # X[k + m*q] = sum_j W_p^{jq} y[j, k]
    out = np.einsum("qj,...jk->...qk", _dft_matrix(p, sign), y)
    return out.reshape(*x.shape[:-1], n)


def _bluestein(x: np.ndarray, sign: int) -> np.ndarray:
    n = x.shape[-1]
    m, chirp, bhat = _bluestein_setup(n, sign)
    a = np.zeros(x.shape[:-1] + (m,), dtype=complex)
    a[..., :n] = x * chirp
    conv = _fft_last(_fft_last(a, -1) * bhat, 1) / m
    return conv[..., :n] * chirp


def fft_axis(x: np.ndarray, axis: int, inverse: bool = False) -> np.ndarray:
    """Complex DFT along ``axis``; the inverse is scaled by 1/n."""
    x = np.moveaxis(np.asarray(x, dtype=complex), axis, -1)
    out = _fft_last(x, 1 if inverse else -1)
    if inverse:
        out = out / x.shape[-1]
    return np.moveaxis(out, -1, axis)


def _rfft_nd(x: np.ndarray, axes: tuple[int, ...]) -> np.ndarray:
    z = fft_axis(x, axes[-1])
    last = axes[-1]
    idx = [slice(None)] * x.ndim
    idx[last] = slice(0, x.shape[last] // 2 + 1)
    z = z[tuple(idx)]
    for ax in axes[:-1]:
        z = fft_axis(z, ax)
    return z


def _irfft_nd(z: np.ndarray, axes: tuple[int, ...], n_last: int) -> np.ndarray:
    for ax in axes[:-1]:
        z = fft_axis(z, ax, inverse=True)
    last = axes[-1]
    z = np.moveaxis(z, last, -1)
    half = n_last // 2 + 1
    if z.shape[-1] != half:
        raise ValueError(f"half-spectrum width {z.shape[-1]} inconsistent with W={n_last}")
    full = np.empty(z.shape[:-1] + (n_last,), dtype=complex)
    full[..., :half] = z
    # self-conjugate bins contribute only their real part
    full[..., 0] = z[..., 0].real
    if n_last % 2 == 0:
        full[..., half - 1] = z[..., half - 1].real
    tail = n_last - half
    if tail:
        full[..., half:] = np.conj(z[..., 1:1 + tail][..., ::-1])
    x = fft_axis(full, -1, inverse=True).real
    return np.moveaxis(x, -1, last)


def _half_weights(half: int, n_last: int) -> np.ndarray:
    c = np.full(half, 2.0)
    c[0] = 1.0
    if n_last % 2 == 0:
        c[-1] = 1.0
    return c


# ---------------------------------------------------------------- spectra

@dataclass
class ComplexSpectrum:
    """Half spectrum of a real signal as separate real/imaginary tensors."""

    re: Tensor
    im: Tensor
    original_w: int

    def __post_init__(self):
        if self.re.shape != self.im.shape:
            raise ValueError("real and imaginary parts differ in shape")

    def complex(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data


def _spatial_axes(ndim: int, count: int, channels_last: bool) -> tuple[int, ...]:
    end = ndim - 1 if channels_last else ndim
    if end - count < 0:
        raise ValueError(f"rank {ndim} too small for a {count}D transform")
    return tuple(range(end - count, end))


def rfftn(x: Tensor, count: int, channels_last: bool = True) -> ComplexSpectrum:
    """Differentiable real FFT over the ``count`` axes preceding the channel axis."""
    axes = _spatial_axes(x.ndim, count, channels_last)
    n_last = x.shape[axes[-1]]
    n_total = int(np.prod([x.shape[a] for a in axes]))
    z = _rfft_nd(x.data, axes)
    half = z.shape[axes[-1]]
    wshape = [1] * x.ndim
    wshape[axes[-1]] = half
    inv_c = (1.0 / _half_weights(half, n_last)).reshape(wshape)
    # adjoint of the half-spectrum map is n_total * irfft(G / c)
    re = make(z.real.copy(), (x,),
              lambda g: (n_total * _irfft_nd(g * inv_c, axes, n_last),), "rfft.re")
    im = make(z.imag.copy(), (x,),
              lambda g: (n_total * _irfft_nd(1j * g * inv_c, axes, n_last),), "rfft.im")
    return ComplexSpectrum(re, im, n_last)


def irfftn(z: ComplexSpectrum, count: int, original_w: int | None = None,
           channels_last: bool = True) -> Tensor:
    """Differentiable inverse of :func:`rfftn` (scaled by 1/n)."""
    n_last = z.original_w if original_w is None else original_w
    re, im = z.re, z.im
    axes = _spatial_axes(re.ndim, count, channels_last)
    half = re.shape[axes[-1]]
    if half != n_last // 2 + 1:
        raise ValueError(f"spectrum width {half} inconsistent with original W={n_last}")
    x = _irfft_nd(re.data + 1j * im.data, axes, n_last)
    out_shape = list(re.shape)
    out_shape[axes[-1]] = n_last
    n_total = int(np.prod([out_shape[a] for a in axes]))
    wshape = [1] * re.ndim
    wshape[axes[-1]] = half
    c = _half_weights(half, n_last).reshape(wshape) / n_total

    def backward(g):
        gz = _rfft_nd(g, axes) * c
        return gz.real, gz.imag

    return make(x, (re, im), backward, "irfft")


def rfft3(x: Tensor) -> ComplexSpectrum:
    """Real FFT over (D, H, W) of a (..., D, H, W, C) tensor."""
    if x.ndim < 4:
        raise ValueError("rfft3 expects (..., D, H, W, C)")
    return rfftn(x, 3)


def irfft3(z: ComplexSpectrum, original_w: int | None = None) -> Tensor:
    return irfftn(z, 3, original_w)


def rfft2(x: Tensor) -> ComplexSpectrum:
    """Real FFT over (H, W) of a (..., H, W, C) tensor."""
    if x.ndim < 3:
        raise ValueError("rfft2 expects (..., H, W, C)")
    return rfftn(x, 2)


def irfft2(z: ComplexSpectrum, original_w: int | None = None) -> Tensor:
    return irfftn(z, 2, original_w)


# ---------------------------------------------------------------- oracle

def dft3_reference(x, half: bool = False) -> np.ndarray:
    """Direct O(N^2) 3D DFT of a (D, H, W, C) array, per channel.

    Returns the full complex spectrum, or its ``W//2 + 1`` half when ``half``.
    """
    a = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if a.ndim != 4:
        raise ValueError("dft3_reference expects (D, H, W, C)")
    d, h, w, c = a.shape
    n = d * h * w
    if n > REFERENCE_CAP:
        raise ValueError(f"reference DFT capped at {REFERENCE_CAP} points, got {n}")
    grid = np.stack(np.meshgrid(np.arange(d), np.arange(h), np.arange(w), indexing="ij"), -1)
    pts = grid.reshape(-1, 3).astype(np.float64)
    dims = np.array([d, h, w], dtype=np.float64)
    phase = (pts / dims) @ pts.T  # <k, n> / N per axis, symmetric in k and n
    kernel = np.exp(-2j * np.pi * phase)
    full = (kernel @ a.reshape(n, c)).reshape(d, h, w, c)
    return full[:, :, : w // 2 + 1] if half else full


def full_from_half(zh: np.ndarray, w: int) -> np.ndarray:
    """Rebuild a (D, H, W, C) spectrum from its half by conjugate symmetry."""
    d, h = zh.shape[:2]
    full = np.empty((d, h, w) + zh.shape[3:], dtype=complex)
    half = w // 2 + 1
    full[:, :, :half] = zh
    for kw in range(half, w):
        src = zh[:, :, w - kw]
        full[:, :, kw] = np.conj(src[(-np.arange(d)) % d][:, (-np.arange(h)) % h])
    return full
