"""End-to-end desk-scale trial on synthetic fragments.

One trial trains the desk preset on four synthetic fragments and scores the
final-epoch model on two held-out fragments, alongside a brightness baseline
that labels the brightest prevalence-sized fraction of the map as ink.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .data import SynthParams, mean_intensity_baseline, quarter_truth, synth_fragment
from .inference import default_depth_window, tile_predict
from .metrics import ConfusionCounts, binarize, f_beta, pseudo_fmeasure
from .train import Fragment, train

N_TRAIN, N_HELDOUT = 4, 2


@dataclass
class TrialResult:
    seed: int
    delta: float
    prevalence: float
    f_beta: float  # threshold 0.5
    pfm: float
    matched_f_beta: float  # model map thresholded at the prevalence quantile
    baseline_f_beta: float
    history: list = field(default_factory=list)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def make_fragments(seed: int, delta: float, params: SynthParams | None = None):
    p = replace(params or SynthParams(), delta=delta)
    tr = [Fragment(*synth_fragment(10_000 * seed + i, p), f"train{i}") for i in range(N_TRAIN)]
    ho = [Fragment(*synth_fragment(10_000 * seed + 100 + i, p), f"heldout{i}") for i in range(N_HELDOUT)]
    return tr, ho


def prevalence_matched(score: np.ndarray, prevalence: float) -> np.ndarray:
    """Mark the top ``prevalence`` fraction of ``score`` as positive."""
    if prevalence <= 0:
        return np.zeros_like(score)
    return (score >= np.quantile(score, 1 - prevalence)).astype(np.float64)


def score_heldout(model, frags: list[Fragment], cfg: TrainConfig) -> dict:
    counts = ConfusionCounts(0, 0, 0, 0)
    matched = ConfusionCounts(0, 0, 0, 0)
    base = ConfusionCounts(0, 0, 0, 0)
    pfms, prev = [], []
    for fr in frags:
        window = default_depth_window(fr.volume.slices, cfg.subvolume[0])
        prob = tile_predict(fr.volume.voxels, model, window)
        gt = quarter_truth(fr.mask.labels)
        pv = float(gt.mean())
        prev.append(pv)
        pred = binarize(prob, cfg.threshold)
        counts += ConfusionCounts.from_maps(pred, gt)
        pfms.append(pseudo_fmeasure(pred, gt))
        matched += ConfusionCounts.from_maps(prevalence_matched(prob, pv), gt)
        base += ConfusionCounts.from_maps(mean_intensity_baseline(fr.volume, pv, window), gt)
    return {"f_beta": f_beta(counts), "pfm": float(np.mean(pfms)), "matched_f_beta": f_beta(matched),
            "baseline_f_beta": f_beta(base), "prevalence": float(np.mean(prev))}


def run_trial(seed: int, out_dir, delta: float = 1.0, cfg: TrainConfig | None = None,
              progress=None) -> TrialResult:
    cfg = replace(cfg or TrainConfig(), seed=seed)
    tr, ho = make_fragments(seed, delta)
    res = train(cfg, tr, ho, out_dir, progress=progress)
    s = score_heldout(res.model, ho, cfg)
    out = TrialResult(seed, delta, s["prevalence"], s["f_beta"], s["pfm"], s["matched_f_beta"],
                      s["baseline_f_beta"], res.history)
    Path(out_dir, "trial.json").write_text(out.to_json() + "\n")
    return out


def criterion_holds(trial: TrialResult, control: TrialResult | None = None) -> dict[str, bool]:
    checks = {
        "heldout_f_beta": trial.f_beta >= 0.60,
        "heldout_pfm": trial.pfm >= 0.60,
        "baseline_fails": trial.baseline_f_beta <= trial.prevalence + 0.05,
    }
    if control is not None:
        checks["control_at_baseline"] = abs(control.matched_f_beta - control.baseline_f_beta) <= 0.05
    return checks
