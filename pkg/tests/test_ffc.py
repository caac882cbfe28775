import numpy as np
import pytest

from vffc.ffc import (FFC, FFCResidualBlock, SpectralTransform, copy_as_spatial, sffc_forward,
                      spectral_transform_3d, stffc_forward, vffc_forward, vffc_residual_block)
from vffc.spectral import dft3_reference
from vffc.tensor import Tensor, grad_check, no_grad


def randomise_stats(layer, rng):
    for name, buf in layer.named_buffers().items():
        if name.endswith("running_var"):
            buf[...] = rng.uniform(0.5, 2.0, buf.shape)
        else:
            buf[...] = rng.normal(0, 0.3, buf.shape)
    for name, p in layer.named_parameters().items():
        if name.endswith("bias") or name.endswith("beta"):
            p.data = rng.normal(0, 0.3, p.shape)
        elif name.endswith("gamma"):
            p.data = rng.uniform(0.5, 1.5, p.shape)


def zero_all(layer):
    """Zero every conv, identity batch norms (gamma 1, beta 0, unit stats)."""
    for name, p in layer.named_parameters().items():
        p.data = np.ones(p.shape) if name.endswith("gamma") else np.zeros(p.shape)
    for name, buf in layer.named_buffers().items():
        buf[...] = 1.0 if name.endswith("running_var") else 0.0


def centre_only(layer):
    for p in layer.parameters():
        if p.ndim == 5 and p.shape[2] == 3:
            keep = p.data[:, :, 1].copy()
            p.data = np.zeros(p.shape)
            p.data[:, :, 1] = keep


def run(layer, x):
    with no_grad():
        return layer(Tensor(x)).data


@pytest.mark.parametrize("kind", ["vffc", "stffc"])
@pytest.mark.parametrize("shape", [(1, 4, 8, 8, 4), (2, 3, 5, 7, 4), (1, 2, 3, 2, 6), (2, 1, 1, 1, 2)])
def test_shape_preservation_3d(kind, shape, rng):
    layer = FFC(shape[-1], rng, kind, depth=shape[1])
    out = (vffc_forward if kind == "vffc" else stffc_forward)(Tensor(rng.standard_normal(shape)), layer)
    assert out.shape == shape


@pytest.mark.parametrize("shape", [(1, 8, 8, 4), (2, 5, 7, 6), (1, 3, 2, 2)])
def test_shape_preservation_2d(shape, rng):
    layer = FFC(shape[-1], rng, "sffc")
    assert sffc_forward(Tensor(rng.standard_normal(shape)), layer).shape == shape


@pytest.mark.parametrize("kind,shape", [("vffc", (1, 4, 8, 8, 4)), ("stffc", (1, 4, 8, 8, 4)),
                                        ("sffc", (1, 8, 8, 4))])
def test_zero_parameters_give_zero(kind, shape, rng):
    layer = FFC(shape[-1], rng, kind, depth=shape[1] if len(shape) == 5 else None).eval()
    zero_all(layer)
    assert np.all(run(layer, rng.standard_normal(shape)) == 0)


def test_split_mismatch(rng):
    with pytest.raises(ValueError):
        FFC(4, rng)(Tensor(np.ones((1, 2, 4, 4, 6))))
    with pytest.raises(ValueError):
        FFC(4, rng, global_channels=4)


def test_stffc_needs_depth(rng):
    with pytest.raises(ValueError):
        FFC(4, rng, "stffc")


def test_spectral_identity_with_bypass(rng):
    st = SpectralTransform(3, rng)
    st.conv.weight.data = np.eye(6).reshape(6, 6, 1, 1, 1)
    st.conv.bias.data = np.zeros(6)
    st.bypass_norm = st.bypass_relu = True
    x = rng.standard_normal((2, 3, 5, 6, 3))
    assert np.abs(run(st, x) - x).max() < 1e-10


def test_spectral_zero_input(rng):
    st = SpectralTransform(2, rng).eval()
    st.conv.bias.data = np.zeros(4)
    assert np.all(run(st, np.zeros((1, 2, 4, 4, 2))) == 0)


def test_spectral_against_direct_dft(rng):
    c = 2
    st = SpectralTransform(c, rng).eval()
    randomise_stats(st, rng)
    x = rng.standard_normal((2, 3, 4, 5, c))
    got = spectral_transform_3d(Tensor(x), st).data
    w = st.conv.weight.data.reshape(2 * c, 2 * c)
    b = st.conv.bias.data
    bn = st.bn
    expect = np.empty_like(x)
    for n in range(x.shape[0]):
        z = dft3_reference(x[n], half=True)
        stacked = np.concatenate([z.real, z.imag], -1)
        y = stacked @ w.T + b
        y = (y - bn.running_mean) / np.sqrt(bn.running_var + bn.eps) * bn.gamma.data + bn.beta.data
        y = np.maximum(y, 0)
        spec = y[..., :c] + 1j * y[..., c:]
        expect[n] = np.fft.irfftn(spec, s=x.shape[1:4], axes=(0, 1, 2))
    assert np.abs(got - expect).max() < 1e-9


@pytest.mark.parametrize("seed", range(5))
def test_depth_one_equivalence(seed):
    rng = np.random.default_rng(seed)
    c = 4
    v = FFC(c, rng, "vffc").eval()
    randomise_stats(v, rng)
    centre_only(v)
    s = FFC(c, rng, "sffc").eval()
    t = FFC(c, rng, "stffc", depth=1).eval()
    copy_as_spatial(v, s)
    copy_as_spatial(v, t)
    for name, p in t.named_parameters().items():  # stffc keeps 3D branch convs
        p.data = v.named_parameters()[name].data.reshape(p.shape).copy()
    x = rng.standard_normal((2, 1, 6, 7, c))
    yv, yt = run(v, x)[:, 0], run(t, x)[:, 0]
    ys = run(s, x[:, 0])
    assert np.abs(yv - ys).max() < 1e-9
    assert np.abs(yt - ys).max() < 1e-9


def test_spectral_path_is_global(rng):
    layer = FFC(4, rng, "vffc").eval()
    randomise_stats(layer, rng)
    x = rng.standard_normal((1, 5, 6, 7, 2))
    x2 = x.copy()
    x2[0, 2, 3, 3, 0] += 1.0
    d = np.abs(run(layer.spectral, x2) - run(layer.spectral, x))
    assert d.sum(axis=-1).min() > 0


def test_local_path_is_5_cubed(rng):
    layer = FFC(4, rng, "vffc")
    x = rng.standard_normal((1, 9, 9, 9, 2))
    x2 = x.copy()
    x2[0, 4, 4, 4, 1] += 1.0

    def local(a):
        with no_grad():
            return layer.l2l_b(layer.l2l_a(Tensor(a))).data

    d = np.abs(local(x2) - local(x)).sum(axis=-1)[0]
    changed = np.argwhere(d > 0)
    assert changed.min() >= 2 and changed.max() <= 6
    assert d[2:7, 2:7, 2:7].min() > 0


def test_residual_block_identities(rng):
    blk = FFCResidualBlock(4, rng, "vffc", drop_path_rate=0.1, depth=2)
    x = rng.standard_normal((2, 2, 4, 4, 4))
    blk.train()
    blk.forced_mask = np.zeros((2, 1, 1, 1, 1))
    assert np.array_equal(run(blk, x), x)
    blk.forced_mask = None
    blk.eval()
    for ffc in (blk.ffc1, blk.ffc2):
        zero_all(ffc)
    assert np.array_equal(vffc_residual_block(Tensor(x), blk).data, x)


@pytest.mark.parametrize("kind", ["vffc", "stffc", "sffc"])
def test_gradients(kind, rng):
    shape = (2, 4, 4, 4) if kind == "sffc" else (2, 2, 4, 4, 4)
    layer = FFC(4, rng, kind, depth=2)
    wts = rng.standard_normal(shape)
    x = rng.standard_normal(shape)
    coords = rng.choice(x.size, 40, replace=False)
    assert grad_check(lambda t: (layer(t) * Tensor(wts)).sum(), x, coords=coords) < 1e-4


def test_residual_block_gradient(rng):
    blk = FFCResidualBlock(4, rng, "vffc", depth=2).eval()
    randomise_stats(blk, rng)
    x = rng.standard_normal((1, 2, 4, 4, 4))
    assert grad_check(lambda t: vffc_residual_block(t, blk).sum(), x) < 1e-4
