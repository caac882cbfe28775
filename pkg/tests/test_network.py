import numpy as np
import pytest

from vffc.network import (InkNet, NetworkConfig, bottleneck, encode3d, forward, load_checkpoint,
                          preset, save_checkpoint)
from vffc.tensor import Tensor, backward, grad_check, no_grad, sigmoid


@pytest.fixture(scope="module")
def desk():
    return InkNet(preset("desk")).eval()


def run(model, x, **kw):
    with no_grad():
        return model(Tensor(x), **kw)


def identity_batchnorm(model):
    for name, p in model.named_parameters().items():
        if name.endswith("bias") or name.endswith("beta"):
            p.data = np.zeros(p.shape)
    for name, b in model.named_buffers().items():
        b[...] = 1.0 if name.endswith("running_var") else 0.0


def test_desk_feature_shapes(desk):
    with no_grad():
        feats = encode3d(Tensor(np.random.default_rng(0).random((1, 16, 256, 256, 1))), desk)
    assert [f.shape[2:] for f in feats] == [(64, 64, 16), (32, 32, 32), (16, 16, 64), (8, 8, 128)]
    assert [f.shape[1] for f in feats] == desk.config.stage_depths()
    assert feats[-1].shape == (1, 2, 8, 8, 128)


def test_desk_forward_shapes(desk):
    assert run(desk, np.zeros((1, 16, 256, 256, 1))).shape == (1, 64, 64, 1)
    assert run(desk, np.zeros((1, 16, 128, 128, 1))).shape == (1, 32, 32, 1)


def test_zero_input_zero_features():
    m = InkNet(preset("tiny")).eval()
    identity_batchnorm(m)
    with no_grad():
        feats = m.encode(Tensor(np.zeros((1, 4, 32, 32, 1))))
    assert all(np.all(f.data == 0) for f in feats)


def basic_block(cin, cout, down):
    n = cin * cout * 27 + cout + 2 * cout + cout * cout * 27 + cout + 2 * cout
    return n + (cin * cout + cout + 2 * cout if down else 0)


def ffc_layer(c, cg):
    cl = c - cg
    convs = (cl * cl * 27 + cl) * 2 + (cg * cl * 27 + cl) + (cl * cg * 27 + cg) + (cg * cg * 27 + cg)
    spectral = (2 * cg) * (2 * cg) + 2 * cg + 2 * (2 * cg)
    return convs + spectral + 2 * cl + 2 * cg


def test_desk_parameter_count_by_hand(desk):
    stem = 1 * 16 * 3 * 7 * 7 + 16 + 2 * 16
    enc = (basic_block(16, 16, True) + basic_block(16, 16, False)
           + basic_block(16, 32, True) + basic_block(32, 32, False)
           + basic_block(32, 64, True) + basic_block(64, 64, False)
           + basic_block(64, 128, True) + basic_block(128, 128, False))
    neck = 3 * 2 * ffc_layer(128, 64)
    dec = sum(ci * co * 9 + co + 2 * co for ci, co in [(192, 64), (96, 32), (48, 16), (16, 16)]) + 16 + 1
    assert desk.parameter_count() == stem + enc + neck + dec


@pytest.mark.parametrize("kind", ["none", "conv3d", "stffc", "vffc"])
def test_bottleneck_kinds_preserve_shape(kind, rng):
    m = InkNet(preset("desk", bottleneck=kind)).eval()
    x = rng.standard_normal((1, 2, 8, 8, 128))
    with no_grad():
        y = bottleneck(Tensor(x), m)
    assert y.shape == x.shape
    if kind == "none":
        assert np.array_equal(y.data, x)


def test_zeroed_vffc_bottleneck_is_identity(rng):
    m = InkNet(preset("tiny", bottleneck="vffc")).eval()
    for blk in m.bottleneck.blocks:
        for name, p in blk.named_parameters().items():
            p.data = np.ones(p.shape) if name.endswith("gamma") else np.zeros(p.shape)
    x = rng.standard_normal((1, 2, 4, 4, 8))
    with no_grad():
        assert np.array_equal(m.bottleneck(Tensor(x)).data, x)


def test_controlled_ablation_weights():
    states = {k: InkNet(preset("desk", bottleneck=k, seed=3)).state_dict()
              for k in ("none", "conv3d", "stffc", "vffc")}
    ref = states["vffc"]
    for k, st in states.items():
        shared = [n for n in st if not n.startswith("bottleneck.")]
        assert shared == [n for n in ref if not n.startswith("bottleneck.")]
        for n in shared:
            assert st[n].tobytes() == ref[n].tobytes(), (k, n)
        if k != "none":
            assert any(n.startswith("bottleneck.") for n in st)


@pytest.mark.parametrize("overrides", [
    dict(widths=[4, 8], spatial_strides=[4, 2], depth_strides=[2, 1], blocks=[1, 1], input_depth=4),
    dict(widths=[4, 6, 8], spatial_strides=[4, 2, 2], depth_strides=[1, 1, 1], blocks=[1, 1, 1],
         input_depth=3, bottleneck="conv3d"),
    dict(widths=[4], spatial_strides=[4], depth_strides=[1], blocks=[1], input_depth=2, bottleneck="stffc"),
])
def test_output_is_quarter_resolution(overrides, rng):
    m = InkNet(NetworkConfig(bottleneck_blocks=1, **{"bottleneck": "vffc", **overrides})).eval()
    s = m.config.total_stride
    x = rng.standard_normal((1, m.config.input_depth, 2 * s, 3 * s, 1))
    assert run(m, x).shape == (1, 2 * s // 4, 3 * s // 4, 1)


def test_config_invariants():
    with pytest.raises(ValueError):
        NetworkConfig(spatial_strides=[4, 2, 2, 1])
    with pytest.raises(ValueError):
        NetworkConfig(bottleneck="lstm")
    with pytest.raises(ValueError):
        NetworkConfig(widths=[16, 32])


def test_input_divisibility(desk):
    with pytest.raises(ValueError):
        run(desk, np.zeros((1, 16, 100, 256, 1)))
    with pytest.raises(ValueError):
        run(desk, np.zeros((1, 16, 256, 256)))


def test_tiny_forward_gradient(rng):
    m = InkNet(preset("tiny", bottleneck="vffc"))
    x = rng.random((1, 4, 32, 32, 1))
    coords = rng.choice(x.size, 30, replace=False)
    m.train()
    m.set_rng(np.random.default_rng(0))
    for blk in m.bottleneck.blocks:
        blk.drop_path_rate = 0.0
    assert grad_check(lambda t: sigmoid(m(t)).sum(), x, coords=coords) < 1e-4


@pytest.mark.parametrize("kind", ["none", "conv3d", "stffc", "vffc"])
def test_every_parameter_gets_gradient(kind, rng):
    m = InkNet(preset("tiny", bottleneck=kind, drop_path=0.0)).train()
    x = Tensor(rng.random((2, 4, 32, 32, 1)))
    target = rng.random((2, 8, 8, 1))
    out = sigmoid(m(x))
    backward(((out - Tensor(target)) * (out - Tensor(target))).sum())
    dead = [n for n, p in m.named_parameters().items() if p.grad is None or not np.any(p.grad)]
    assert dead == []


def test_checkpoint_roundtrip(tmp_path, rng):
    m = InkNet(preset("tiny", seed=5))
    m.train()
    with no_grad():
        m(Tensor(rng.random((2, 4, 32, 32, 1))))  # move running stats off their defaults
    m.eval()
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m, {"note": "x"})
    m2, extra = load_checkpoint(path)
    assert extra == {"note": "x"}
    assert m2.config == m.config
    for k, v in m.state_dict().items():
        assert v.tobytes() == m2.state_dict()[k].tobytes()
    x = rng.random((1, 4, 32, 32, 1))
    assert run(m, x).data.tobytes() == run(m2.eval(), x).data.tobytes()
    raw = path.read_bytes()
    assert raw[:8] == b"VFFCCKPT"
    path.write_bytes(raw[:12] + bytes(32) + raw[44:])
    with pytest.raises(ValueError):
        load_checkpoint(path)


def test_functional_forward(rng):
    m = InkNet(preset("tiny")).eval()
    x = rng.random((1, 4, 32, 32, 1))
    with no_grad():
        assert np.array_equal(forward(Tensor(x), m).data, m(Tensor(x)).data)
