import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vffc import spectral
from vffc.spectral import (ComplexSpectrum, dft3_reference, fft_axis, full_from_half, irfft2,
                           irfft3, rfft2, rfft3)
from vffc.tensor import Tensor, grad_check, scale

dims = st.integers(1, 6)


def ref3(x, half=False):
    """Reference spectrum of a single-channel (D, H, W) volume."""
    return dft3_reference(x[..., None], half=half)[..., 0]


def spectrum(z) -> np.ndarray:
    return z.re.data + 1j * z.im.data


def test_dc_of_constant():
    z = spectrum(rfft3(Tensor(np.full((2, 2, 2, 1), 1.5))))
    assert z[0, 0, 0, 0] == pytest.approx(12.0)
    z[0, 0, 0, 0] = 0
    assert np.abs(z).max() < 1e-12


def test_delta_is_flat():
    x = np.zeros((3, 4, 5, 1))
    x[0, 0, 0, 0] = 1
    z = spectrum(rfft3(Tensor(x)))
    assert np.allclose(z, 1 + 0j, atol=1e-12)


def test_half_width_includes_nyquist():
    for w in (1, 2, 7, 8):
        assert rfft3(Tensor(np.ones((1, 1, w, 1)))).re.shape[2] == w // 2 + 1


def test_random_matches_reference(rng):
    x = rng.standard_normal((3, 4, 5, 2))
    z = spectrum(rfft3(Tensor(x)))
    ref = dft3_reference(x, half=True)
    assert np.abs(z - ref).max() < 1e-9


def test_inverse_of_dc():
    re = np.zeros((2, 2, 2, 1))
    re[0, 0, 0, 0] = 8 * 0.75
    x = irfft3(ComplexSpectrum(Tensor(re), Tensor(np.zeros_like(re)), 2))
    assert np.allclose(x.data, 0.75, atol=1e-12)


def test_roundtrip_444(rng):
    x = rng.standard_normal((4, 4, 4, 3))
    assert np.abs(irfft3(rfft3(Tensor(x))).data - x).max() < 1e-10


def test_reference_spectrum_inverts(rng):
    x = rng.standard_normal((3, 5, 6))
    half = ref3(x, half=True)[..., None]
    back = irfft3(ComplexSpectrum(Tensor(half.real), Tensor(half.imag), 6)).data[..., 0]
    assert np.abs(back - x).max() < 1e-9


def test_reference_cosine():
    x = np.cos(2 * np.pi * np.arange(8) / 8).reshape(1, 1, 8)
    z = ref3(x)[0, 0]
    assert z[1] == pytest.approx(4) and z[7] == pytest.approx(4)
    z[[1, 7]] = 0
    assert np.abs(z).max() < 1e-12


def test_reference_linearity(rng):
    x, y = rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 3, 4))
    lhs = ref3(2 * x - 3 * y)
    assert np.abs(lhs - (2 * ref3(x) - 3 * ref3(y))).max() < 1e-9


def test_reference_size_cap():
    with pytest.raises(ValueError):
        dft3_reference(np.zeros((17, 16, 16, 1)))


def test_inconsistent_width_rejected(rng):
    z = rfft3(Tensor(rng.standard_normal((2, 2, 6, 1))))
    with pytest.raises(ValueError):
        irfft3(z, 9)


@pytest.mark.parametrize("n", [1, 2, 3, 5, 7, 12, 17, 31, 37, 53, 97, 128, 210])
def test_fft_axis_against_direct_sum(n, rng):
    x = rng.standard_normal((2, n)) + 1j * rng.standard_normal((2, n))
    k = np.arange(n)
    mat = np.exp(-2j * np.pi * np.outer(k, k) / n)
    assert np.abs(fft_axis(x, -1) - x @ mat.T).max() < 1e-9 * max(1, n)
    assert np.abs(fft_axis(fft_axis(x, -1), -1, inverse=True) - x).max() < 1e-10


@given(dims, dims, dims, st.integers(0, 2**31 - 1))
def test_oracle_equivalence(d, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((d, h, w))
    z = spectrum(rfft3(Tensor(x[..., None])))[..., 0]
    assert np.abs(z - ref3(x, half=True)).max() < 1e-9


@given(dims, dims, dims, st.integers(0, 2**31 - 1))
def test_parseval(d, h, w, seed):
    x = np.random.default_rng(seed).standard_normal((d, h, w))
    zh = spectrum(rfft3(Tensor(x[..., None])))[..., 0]
    full = full_from_half(zh[..., None], w)
    assert np.sum(np.abs(full) ** 2) / x.size == pytest.approx(np.sum(x ** 2), rel=1e-9)


def test_depth_one_equals_2d(rng):
    x = rng.standard_normal((1, 5, 6, 2))
    a, b = rfft3(Tensor(x)), rfft2(Tensor(x[0]))
    assert np.array_equal(a.re.data[0], b.re.data) or np.abs(a.re.data[0] - b.re.data).max() < 1e-12
    assert np.abs(a.im.data[0] - b.im.data).max() < 1e-12
    back = irfft2(b)
    assert np.abs(back.data - x[0]).max() < 1e-10


@pytest.mark.parametrize("shape", [(2, 3, 4, 2), (3, 2, 5, 1), (1, 4, 1, 1)])
def test_gradient_through_pointwise_scaling(shape, rng):
    w = rng.standard_normal(shape[:-2] + (shape[2] // 2 + 1, shape[3]))

    def f(t):
        z = rfft3(t)
        return (irfft3(ComplexSpectrum(z.re * Tensor(w), z.im * Tensor(w[::-1].copy()), shape[2]))
                * Tensor(rng.standard_normal(shape) * 0 + 1.3)).sum()

    assert grad_check(f, rng.standard_normal(shape)) < 1e-5


def test_gradient_of_each_spectrum_part(rng):
    shape = (3, 3, 5, 1)
    a, b = rng.standard_normal((3, 3, 3, 1)), rng.standard_normal((3, 3, 3, 1))
    assert grad_check(lambda t: (rfft3(t).re * Tensor(a)).sum(), rng.standard_normal(shape)) < 1e-6
    assert grad_check(lambda t: (rfft3(t).im * Tensor(b)).sum(), rng.standard_normal(shape)) < 1e-6
    g = rng.standard_normal(shape)

    def inv(t):
        return (irfft3(ComplexSpectrum(t, Tensor(b), 5)) * Tensor(g)).sum()

    assert grad_check(inv, a) < 1e-6


def test_numpy_cross_check(rng):
    x = rng.standard_normal((4, 7, 9, 2))
    z = spectrum(rfft3(Tensor(x)))
    assert np.abs(z - np.fft.rfftn(x, axes=(0, 1, 2))).max() < 1e-10
