"""Desk-scale synthetic experiment: several seeds plus the no-signal control.

Usage: python3 scripts/desk_experiment.py --out runs/desk --seeds 0 1 2
"""
import argparse
import json
import time
from pathlib import Path

from vffc.experiment import criterion_holds, run_trial


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default="runs/desk")
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--control-seed", type=int, default=0)
    ap.add_argument("--skip-control", action="store_true")
    args = ap.parse_args()
    out = Path(args.out)
    summary = {}
    control = None
    if not args.skip_control:
        t0 = time.time()
        control = run_trial(args.control_seed, out / f"control_{args.control_seed}", delta=0.0)
        print(f"control: matched={control.matched_f_beta:.3f} baseline={control.baseline_f_beta:.3f} "
              f"({time.time() - t0:.0f}s)", flush=True)
        summary["control"] = json.loads(control.to_json())
    for seed in args.seeds:
        t0 = time.time()
        trial = run_trial(seed, out / f"seed_{seed}",
                          progress=lambda r: print(f"  epoch {r['epoch']} f_beta={r['val_f_beta']:.3f}", flush=True))
        checks = criterion_holds(trial, control)
        print(f"seed {seed}: f_beta={trial.f_beta:.3f} pfm={trial.pfm:.3f} baseline={trial.baseline_f_beta:.3f} "
              f"prevalence={trial.prevalence:.3f} checks={checks} ({time.time() - t0:.0f}s)", flush=True)
        summary[f"seed_{seed}"] = {"trial": json.loads(trial.to_json()), "checks": checks}
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")


if __name__ == "__main__":
    main()
