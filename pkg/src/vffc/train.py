"""Deterministic training loop with per-epoch validation and checkpoints."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import (D4, FragmentSample, FragmentVolume, InkMask, build_lattice, d4_transform,
                   quarter_truth, sample_subvolume)
from .inference import default_depth_window, tile_predict
from .losses import total_loss
from .metrics import ConfusionCounts, binarize, f_beta, pseudo_fmeasure, psnr
from .network import InkNet, preset, save_checkpoint
from .nn import channel_dropout
from .optim import AdamW, AdamWHyper, onecycle_lr
from .tensor import NonFiniteError, Tensor, backward, sigmoid

LOG_HEADER = ["epoch", "loss", "val_f_beta", "val_pfm", "val_psnr", "lr"]


class TrainingAborted(RuntimeError):
    """Raised when a batch produces a non-finite value; carries its provenance."""

    def __init__(self, message: str, provenance: list[str]):
        super().__init__(message + "; batch: " + " | ".join(provenance))
        self.provenance = provenance


@dataclass
class Fragment:
    volume: FragmentVolume
    mask: InkMask
    name: str = ""


@dataclass
class TrainResult:
    model: InkNet
    best_f_beta: float
    best_epoch: int
    history: list[dict] = field(default_factory=list)
    checkpoint: Path | None = None
    log: Path | None = None


def build_model(cfg: TrainConfig) -> InkNet:
    return InkNet(preset(cfg.preset, **cfg.network_overrides()))


def draw_sample(cfg: TrainConfig, cell, frag: Fragment, rng: np.random.Generator) -> FragmentSample:
    """Crop, optional D4 element and optional channel (depth-slice) dropout."""
    s = sample_subvolume(cell, frag.volume, frag.mask, cfg.subvolume, rng, cfg.random_crop)
    if cfg.dihedral:
        s = d4_transform(s, D4[int(rng.integers(len(D4)))])
    if cfg.channel_dropout:
        vol = channel_dropout(s.volume[None], cfg.chdrop_rate, cfg.chdrop_max_fraction,
                              True, rng, axis=1)[0]
        if not np.array_equal(vol, s.volume):
            dropped = tuple(int(i) for i in np.flatnonzero(~vol.any(axis=(1, 2)) & s.volume.any(axis=(1, 2))))
            s = FragmentSample(vol, s.mask, s.fragment, s.origin, s.transforms + (f"chdrop{dropped}",))
    return s


def evaluate(model: InkNet, frags: list[Fragment], cfg: TrainConfig) -> dict:
    """F-beta on pooled counts; pFM and PSNR averaged per fragment."""
    counts = ConfusionCounts(0, 0, 0, 0)
    pfms, psnrs, per = [], [], []
    for fr in frags:
        d = cfg.subvolume[0]
        if cfg.val_depth_start >= 0:
            window = (cfg.val_depth_start, cfg.val_depth_start + d)
        else:
            window = default_depth_window(fr.volume.slices, d)
        prob = tile_predict(fr.volume.voxels, model, window)
        pred = binarize(prob, cfg.threshold)
        gt = quarter_truth(fr.mask.labels)
        c = ConfusionCounts.from_maps(pred, gt)
        counts = counts + c
        pfms.append(pseudo_fmeasure(pred, gt))
        psnrs.append(psnr(pred, gt))
        per.append({"fragment": fr.name, "f_beta": f_beta(c), "pfm": pfms[-1], "psnr": psnrs[-1]})
    return {"f_beta": f_beta(counts), "pfm": float(np.mean(pfms)) if pfms else 0.0,
            "psnr": float(np.mean(psnrs)) if psnrs else 0.0, "per_fragment": per}


def _fmt(v: float) -> str:
    return repr(float(v))


def train(cfg: TrainConfig, train_frags: list[Fragment], val_frags: list[Fragment],
          out_dir, progress=None) -> TrainResult:
    """Train, validate every epoch, keep the best-by-F-beta checkpoint.

    Writes ``train_log.csv``, ``best.ckpt`` and ``last.ckpt`` to ``out_dir``.
    Every random draw is keyed on (seed, epoch, sample index) so a rerun
    reproduces the log exactly.
    """
    if not train_frags:
        raise ValueError("need at least one training fragment")
    if not val_frags:
        raise ValueError("need at least one held-out fragment")
    ids = {id(f.volume) for f in train_frags}
    if any(id(f.volume) in ids for f in val_frags):
        raise ValueError("held-out fragments must be disjoint from training fragments")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    model = build_model(cfg)
    named = model.named_parameters()
    opt = AdamW(named, AdamWHyper(cfg.lr, cfg.beta1, cfg.beta2, cfg.weight_decay, cfg.adam_eps))

    cells = []
    for i, fr in enumerate(train_frags):
        cells += build_lattice(fr.volume.shape, cfg.cell, cfg.lattice_stride, fragment=i)
    items = cells * cfg.cell_repeats
    steps_per_epoch = math.ceil(len(items) / cfg.batch_size)
    total_steps = max(1, cfg.epochs * steps_per_epoch)

    log_path = out / "train_log.csv"
    best_path = out / "best.ckpt"
    fh = open(log_path, "w", newline="", encoding="utf-8")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(LOG_HEADER)
    fh.flush()
    result = TrainResult(model, -1.0, -1, checkpoint=best_path, log=log_path)
    if cfg.epochs == 0:
        save_checkpoint(best_path, model, {"epoch": 0, "train_config": cfg.to_json()})
        fh.close()
        result.best_f_beta = 0.0
        return result

    step = 0
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(items))
            losses = []
            for b in range(steps_per_epoch):
                idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                samples = []
                for j in idx:
                    rng = np.random.default_rng([cfg.seed, epoch, int(j)])
                    cell = items[j]
                    samples.append(draw_sample(cfg, cell, train_frags[cell.fragment], rng))
                x = np.stack([s.volume for s in samples])[..., None]
                y = np.stack([s.target for s in samples])[..., None]
                prov = [s.provenance() for s in samples]
                model.train()
                model.set_rng(np.random.default_rng([cfg.seed, epoch, b, 7]))
                try:
                    probs = sigmoid(model(Tensor(x)))
                    loss = total_loss(probs, y, cfg.ink_weight, cfg.dice_eps, cfg.loss, cfg.verbatim_wbce)
                    backward(loss)
                    opt.step(onecycle_lr(step, total_steps, cfg.lr, cfg.pct_start,
                                         cfg.div_factor, cfg.final_div_factor))
                except NonFiniteError as exc:
                    raise TrainingAborted(f"non-finite value at epoch {epoch} step {step}: {exc}",
                                          prov) from exc
                finally:
                    opt.zero_grad()
                losses.append(loss.item())
                step += 1
            lr = onecycle_lr(min(step, total_steps), total_steps, cfg.lr, cfg.pct_start,
                             cfg.div_factor, cfg.final_div_factor)
            metrics = evaluate(model, val_frags, cfg)
            row = {"epoch": epoch, "loss": float(np.mean(losses)), "val_f_beta": metrics["f_beta"],
                   "val_pfm": metrics["pfm"], "val_psnr": metrics["psnr"], "lr": lr}
            writer.writerow([epoch] + [_fmt(row[k]) for k in LOG_HEADER[1:]])
            fh.flush()
            result.history.append(row)
            if metrics["f_beta"] > result.best_f_beta:
                result.best_f_beta, result.best_epoch = metrics["f_beta"], epoch
                save_checkpoint(best_path, model, {"epoch": epoch, "train_config": cfg.to_json(),
                                                   "val": metrics})
            if progress is not None:
                progress(row)
        save_checkpoint(out / "last.ckpt", model, {"epoch": cfg.epochs, "train_config": cfg.to_json()})
    finally:
        fh.close()
    return result
