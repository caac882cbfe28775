import csv
from dataclasses import replace

import numpy as np
import pytest

from vffc.config import ConfigError, TrainConfig, load_config, parse_config
from vffc.data import FragmentVolume, LatticeCell, SynthParams, synth_fragment
from vffc.network import load_checkpoint
from vffc.train import LOG_HEADER, Fragment, TrainingAborted, draw_sample, evaluate, train

SMALL = SynthParams(size=(6, 256, 256), strokes=8)


def tiny_cfg(**kw):
    base = dict(preset="tiny", subvolume=(4, 64, 64), cell=(6, 128, 128), lattice_stride=128,
                cell_repeats=1, epochs=2, batch_size=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def frags():
    tr = [Fragment(*synth_fragment(s, SMALL), f"t{s}") for s in (1, 2)]
    va = [Fragment(*synth_fragment(9, SMALL), "v")]
    return tr, va


def test_parse_config_roundtrip():
    cfg = tiny_cfg(loss="dice", ink_weight=2.5, dihedral=False, extra_network={"bottleneck_blocks": 1})
    assert parse_config(cfg.dumps()) == cfg


def test_parse_config_values_and_comments():
    cfg = parse_config("# header\nepochs = 3  # short\n\nsubvolume = 8,64,64\nrandom_crop = off\n")
    assert cfg.epochs == 3 and cfg.subvolume == (8, 64, 64) and cfg.random_crop is False
    assert cfg.lr == TrainConfig().lr


@pytest.mark.parametrize("text,pattern", [
    ("epochs = 2\nlearning_rate = 1", r"cfg:2: unknown key 'learning_rate'"),
    ("epochs 2", r"cfg:1: expected"),
    ("\n\ndihedral = maybe", r"cfg:3: bad value for dihedral"),
    ("epochs = two", r"cfg:1: bad value for epochs"),
    ("subvolume = 32,256,256", r"does not fit"),
    ("batch_size = 0", r"batch_size"),
    ("loss = focal", r"loss"),
])
def test_parse_config_errors(text, pattern):
    with pytest.raises(ConfigError, match=pattern):
        parse_config(text, source="cfg")


def test_load_config(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("seed = 7\n")
    assert load_config(p).seed == 7


def test_network_overrides():
    cfg = tiny_cfg(bottleneck="stffc", drop_path=0.2, extra_network={"bottleneck_blocks": 2})
    assert cfg.network_overrides() == dict(bottleneck="stffc", seed=0, drop_path=0.2, input_depth=4,
                                           bottleneck_blocks=2)


def test_draw_sample_records_transforms(frags):
    tr, _ = frags
    cfg = tiny_cfg(chdrop_rate=0.99)
    cell = LatticeCell((0, 0, 0), (6, 128, 128))
    seen = set()
    for k in range(20):
        s = draw_sample(cfg, cell, tr[0], np.random.default_rng(k))
        assert s.volume.shape == (4, 64, 64) and s.target.shape == (16, 16)
        seen.update(t.split("(")[0] for t in s.transforms)
        assert s.provenance().startswith("fragment=0 origin=")
    assert "chdrop" in seen and len(seen) > 3
    plain = draw_sample(tiny_cfg(dihedral=False, channel_dropout=False, random_crop=False), cell, tr[0],
                        np.random.default_rng(0))
    assert plain.transforms == () and plain.origin == (1, 32, 32)


def test_zero_epochs(tmp_path, frags):
    tr, va = frags
    res = train(tiny_cfg(epochs=0), tr, va, tmp_path)
    assert (tmp_path / "train_log.csv").read_text() == ",".join(LOG_HEADER) + "\n"
    model, extra = load_checkpoint(tmp_path / "best.ckpt")
    assert extra["epoch"] == 0 and model.parameter_count() == res.model.parameter_count()


def test_training_is_reproducible(tmp_path, frags):
    tr, va = frags
    a = train(tiny_cfg(), tr, va, tmp_path / "a")
    b = train(tiny_cfg(), tr, va, tmp_path / "b")
    for name in ("train_log.csv", "best.ckpt", "last.ckpt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = list(csv.DictReader(open(tmp_path / "a" / "train_log.csv")))
    assert [int(r["epoch"]) for r in rows] == [1, 2]
    assert len(a.history) == 2 and a.best_epoch in (1, 2)
    c = train(tiny_cfg(seed=1), tr, va, tmp_path / "c")
    assert (tmp_path / "c" / "last.ckpt").read_bytes() != (tmp_path / "a" / "last.ckpt").read_bytes()


def test_training_reduces_loss(tmp_path, frags):
    tr, va = frags
    res = train(tiny_cfg(epochs=6, cell_repeats=4, dihedral=False, channel_dropout=False), tr, va, tmp_path)
    assert res.history[-1]["loss"] < res.history[0]["loss"]


def test_nonfinite_aborts_with_provenance(tmp_path, frags):
    tr, va = frags
    bad = Fragment(FragmentVolume(np.full((6, 256, 256), np.nan)), tr[0].mask, "bad")
    with pytest.raises(TrainingAborted) as info:
        train(tiny_cfg(), [bad], va, tmp_path)
    assert info.value.provenance and all(p.startswith("fragment=0 origin=") for p in info.value.provenance)
    assert "epoch 1 step 0" in str(info.value)


def test_train_argument_errors(tmp_path, frags):
    tr, va = frags
    with pytest.raises(ValueError, match="disjoint"):
        train(tiny_cfg(), tr, tr[:1], tmp_path)
    with pytest.raises(ValueError):
        train(tiny_cfg(), [], va, tmp_path)
    with pytest.raises(ValueError):
        train(tiny_cfg(), tr, [], tmp_path)


def test_evaluate_reports_per_fragment(frags):
    tr, va = frags
    from vffc.train import build_model
    m = build_model(tiny_cfg())
    out = evaluate(m, va + tr[:1], tiny_cfg())
    assert [p["fragment"] for p in out["per_fragment"]] == ["v", "t1"]
    assert 0.0 <= out["f_beta"] <= 1.0
