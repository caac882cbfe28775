"""Train on 65-slice fragments whose ink lives in slices 28-32, then sweep depth.

Usage: python3 scripts/depth_sweep_experiment.py --out runs/sweep
"""
import argparse
import json
import time
from pathlib import Path

import numpy as np

from vffc.config import TrainConfig
from vffc.data import FragmentVolume, SynthParams, synth_fragment
from vffc.inference import depth_activation_sweep, write_sweep_csv
from vffc.train import Fragment, train

BAND = (28, 33)  # slices 28..32
TRAIN_SLAB = (18, 42)  # training sees 24 slices around the band, like the desk fragments


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/sweep")
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--epochs", type=int, default=15)
    ap.add_argument("--region", type=int, nargs=2, default=(128, 128))
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    params = SynthParams(size=(65, 512, 512), band=BAND)
    base = 10_000 * args.seed + 500
    z0, z1 = TRAIN_SLAB
    tr = []
    for i in range(4):
        vol, mask = synth_fragment(base + i, params)
        tr.append(Fragment(FragmentVolume(vol.voxels[z0:z1].copy(), vol.source), mask, f"train{i}"))
    va = [Fragment(*synth_fragment(base + 100, params), "heldout")]
    cfg = TrainConfig(seed=args.seed, epochs=args.epochs)
    t0 = time.time()
    res = train(cfg, tr, va, out / "train",
                progress=lambda r: print(f"epoch {r['epoch']} f_beta={r['val_f_beta']:.3f}", flush=True))
    y, x = args.region
    region = va[0].volume.voxels[:, y:y + 256, x:x + 256]
    depth = res.model.config.input_depth
    starts = np.arange(region.shape[0] - depth + 1)
    reach = (starts + depth > BAND[0]) & (starts < BAND[1])
    summary = {"final_val_f_beta": res.history[-1]["val_f_beta"], "columns": int(len(starts)),
               "columns_reaching_band": int(reach.sum())}
    # the last stage keeps only a couple of depth slices, so finer layers are swept too
    for layer in (None, "stem", "input"):
        mat = depth_activation_sweep(region, res.model, layer)
        name = layer or "default"
        write_sweep_csv(out / f"sweep_{name}.csv", mat)
        peak = mat.argmax(axis=0)
        in_band = (peak >= BAND[0]) & (peak < BAND[1])
        summary[name] = {"fraction_all_columns": float(in_band.mean()),
                         "fraction_reaching_columns": float(in_band[reach].mean())}
    summary["seconds"] = round(time.time() - t0)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(json.dumps(summary))


if __name__ == "__main__":
    main()
