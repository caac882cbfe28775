"""Command-line entry point: synth, train, predict, eval, bench, sweep, ablate.

Exit codes: 0 success, 2 usage or config error, 3 data/format error,
4 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
BENCH_MEMORY_LIMIT = 1 << 30  # bytes of activations a bench shape may allocate


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    command: str
    config: dict
    seeds: list[int]
    outputs: list[str]
    build: str = ""
    started: str = ""
    finished: str = ""
    notes: dict = field(default_factory=dict)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def build_id() -> str:
    from . import __version__
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True,
                             text=True, cwd=Path(__file__).resolve().parent, timeout=5)
        rev = out.stdout.strip() if out.returncode == 0 else ""
    except (OSError, subprocess.SubprocessError):
        rev = ""
    return f"{__version__}+{rev}" if rev else __version__


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _ints(text: str, n: int | None = None) -> tuple[int, ...]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if n is not None and len(vals) != n:
        raise argparse.ArgumentTypeError(f"expected {n} integers, got {text!r}")
    if any(v < 1 for v in vals):
        raise argparse.ArgumentTypeError(f"sizes must be positive, got {text!r}")
    return vals


def _manifest_path(out: Path, is_dir: bool) -> Path:
    return out / "manifest.json" if is_dir else out.with_name(out.stem + ".manifest.json")


# ---------------------------------------------------------------- synth

def cmd_synth(args) -> int:
    from .data import SynthParams, quarter_truth, save_fragment, synth_fragment
    started = _now()
    params = SynthParams(size=args.size, delta=args.delta, strokes=args.strokes)
    vol, mask = synth_fragment(args.seed, params)
    out = Path(args.out)
    try:
        save_fragment(out, vol, mask)
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from None
    cfg = asdict(params)
    RunManifest("synth", cfg, [args.seed], sorted(p.name for p in out.iterdir()), build_id(), started,
                _now(), {"control": args.delta == 0, "prevalence": mask.prevalence,
                         "quarter_prevalence": float(quarter_truth(mask.labels).mean())}
                ).write(out / "manifest.json")
    print(f"wrote {out} prevalence={mask.prevalence:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--bottleneck", choices=("vffc", "stffc", "conv3d", "none"))
    p.add_argument("--no-dihedral", action="store_true")
    p.add_argument("--no-randcrop", action="store_true")
    p.add_argument("--no-chdrop", action="store_true")
    p.add_argument("--loss", choices=("dice", "wbce", "both"))
    p.add_argument("--ink-weight", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)


def resolve_train_config(args):
    from .config import TrainConfig, load_config
    cfg = load_config(args.config) if args.config else TrainConfig()
    over = {}
    if args.bottleneck:
        over["bottleneck"] = args.bottleneck
    if args.no_dihedral:
        over["dihedral"] = False
    if args.no_randcrop:
        over["random_crop"] = False
    if args.no_chdrop:
        over["channel_dropout"] = False
    if args.loss:
        over["loss"] = args.loss
    if args.ink_weight is not None:
        over["ink_weight"] = args.ink_weight
    if args.seed is not None:
        over["seed"] = args.seed
    if args.epochs is not None:
        over["epochs"] = args.epochs
    return replace(cfg, **over)


def _load_fragments(dirs):
    from .data import load_fragment
    from .train import Fragment
    return [Fragment(*load_fragment(d), Path(d).name) for d in dirs]


def run_training(args, quiet: bool = False):
    from .train import train
    cfg = resolve_train_config(args)
    started = _now()
    tr = _load_fragments(args.data)
    va = _load_fragments(args.val)
    out = Path(args.out)
    report = None if quiet else (lambda row: print(
        f"epoch {row['epoch']}: loss={row['loss']:.4f} f_beta={row['val_f_beta']:.4f} "
        f"pfm={row['val_pfm']:.4f} psnr={row['val_psnr']:.2f}", flush=True))
    result = train(cfg, tr, va, out, progress=report)
    outputs = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    RunManifest("train", asdict(cfg), [cfg.seed], outputs, build_id(), started, _now(),
                {"train": [str(d) for d in args.data], "val": [str(d) for d in args.val],
                 "best_epoch": result.best_epoch, "best_f_beta": result.best_f_beta}
                ).write(out / "manifest.json")
    return cfg, result


def cmd_train(args) -> int:
    _, result = run_training(args)
    print(f"best f_beta={result.best_f_beta:.4f} at epoch {result.best_epoch}")
    return EXIT_OK


# ---------------------------------------------------------------- predict

def cmd_predict(args) -> int:
    from .data import load_volume, save_inkmap
    from .inference import TILE, tile_predict
    from .metrics import binarize
    from .network import load_checkpoint
    from .tensor import save_tensor
    started = _now()
    model, extra = load_checkpoint(args.ckpt)
    vol = load_volume(args.volume)
    d, h, w = vol.shape
    if h < TILE or w < TILE:
        raise ValueError(f"volume {h}x{w} is smaller than one {TILE}x{TILE} tile")
    depth = model.config.input_depth
    if d < depth:
        raise ValueError(f"volume has {d} slices but the model needs {depth}")
    window = None if args.depth_start is None else (args.depth_start, args.depth_start + depth)
    prob = tile_predict(vol.voxels, model, window)
    out = Path(args.out)
    save_inkmap(binarize(prob, args.threshold), out)
    outputs = [out.name]
    if args.prob_out:
        save_inkmap(prob, args.prob_out)
        outputs.append(Path(args.prob_out).name)
    if args.raw:
        save_tensor(args.raw, prob)
        outputs.append(Path(args.raw).name)
    RunManifest("predict", {"ckpt": str(args.ckpt), "volume": str(args.volume), "threshold": args.threshold,
                            "depth_start": args.depth_start, "network": asdict(model.config)},
                [model.config.seed], outputs, build_id(), started, _now()
                ).write(_manifest_path(out, False))
    print(f"wrote {out} ({prob.shape[0]}x{prob.shape[1]})")
    return EXIT_OK


# ---------------------------------------------------------------- eval

REPORT_HEADER = ["fragment", "f_beta", "pfm", "psnr", "threshold"]


def _fmt_metric(v: float) -> str:
    return "inf" if v == float("inf") else f"{v:.6f}"


def cmd_eval(args) -> int:
    from .data import load_inkmap
    from .metrics import ConfusionCounts, binarize, f_beta, pseudo_fmeasure, psnr
    started = _now()
    pred_raw = load_inkmap(args.pred)
    gt = binarize(load_inkmap(args.gt), 0.5)
    if pred_raw.shape != gt.shape:
        raise ValueError(f"prediction {pred_raw.shape} and ground truth {gt.shape} differ in size")
    pred = binarize(pred_raw, args.threshold)
    f = f_beta(ConfusionCounts.from_maps(pred, gt), args.beta)
    pfm = pseudo_fmeasure(pred, gt)
    ps = psnr(pred_raw if args.prob_psnr else pred, gt)
    name = args.name or Path(args.gt).resolve().parent.name
    out = Path(args.out)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        w.writerow([name, _fmt_metric(f), _fmt_metric(pfm), _fmt_metric(ps), args.threshold])
    RunManifest("eval", {"pred": str(args.pred), "gt": str(args.gt), "beta": args.beta,
                         "threshold": args.threshold, "prob_psnr": args.prob_psnr},
                [], [out.name], build_id(), started, _now()).write(_manifest_path(out, False))
    print(f"{name}: f_beta={f:.4f} pfm={pfm:.4f} psnr={_fmt_metric(ps)}")
    return EXIT_OK


# ---------------------------------------------------------------- bench

def _bench_layer(op: str, shape, rng):
    from .ffc import FFC
    from .nn import Conv
    n, d, h, w, c = shape
    if op == "conv3d":
        return Conv(c, c, (3, 3, 3), rng)
    if op == "sffc":
        return FFC(c, rng, "sffc")
    return FFC(c, rng, op, depth=d)


def _bench_input(op: str, shape, rng) -> np.ndarray:
    x = rng.standard_normal(shape)
    return x[:, 0] if op == "sffc" else x


def check_d1_equivalence(shape, seed: int) -> float:
    """Max |vffc - stffc| at depth 1 with shared weights (eval-mode BN)."""
    from .ffc import FFC, copy_as_spatial
    from .tensor import Tensor, no_grad
    n, _, h, w, c = shape
    shape1 = (n, 1, h, w, c)
    rng = np.random.default_rng(seed)
    a = FFC(c, rng, "vffc").eval()
    b = FFC(c, rng, "stffc", depth=1).eval()
    copy_as_spatial(a, b)
    x = np.random.default_rng(seed + 1).standard_normal(shape1)
    with no_grad():
        return float(np.max(np.abs(a(Tensor(x)).data - b(Tensor(x)).data)))


def cmd_bench(args) -> int:
    from .tensor import Tensor, backward
    shape = args.shape
    n, d, h, w, c = shape
    if c < 2 and args.op != "conv3d":
        raise UsageError("FFC ops need at least 2 channels")
    # rough peak: input, im2col buffer (27 taps) and a handful of activations
    est = n * d * h * w * c * 8 * (27 + 16)
    if est > BENCH_MEMORY_LIMIT:
        raise UsageError(f"shape {shape} needs about {est / 2**20:.0f} MiB, over the "
                         f"{BENCH_MEMORY_LIMIT / 2**20:.0f} MiB guard")
    if d == 1 and args.op in ("vffc", "stffc"):
        err = check_d1_equivalence(shape, args.seed)
        if err > 1e-9:
            print(f"vffc/stffc depth-1 mismatch {err:.3e}", file=sys.stderr)
            return EXIT_NUMERIC
    rng = np.random.default_rng(args.seed)
    layer = _bench_layer(args.op, shape, rng)
    x = _bench_input(args.op, shape, np.random.default_rng(args.seed + 1))
    rows = []
    for phase in ("forward", "forward_backward"):
        times = []
        for _ in range(args.iters):
            t0 = time.perf_counter()
            y = layer(Tensor(x, requires_grad=phase != "forward"))
            if phase != "forward":
                backward(y.sum())
                layer.zero_grad()
            times.append(time.perf_counter() - t0)
        q = np.percentile(times, [50, 10, 90])
        rows.append([args.op, phase, "x".join(map(str, shape)), args.iters] + [f"{v:.6f}" for v in q])
    wr = csv.writer(sys.stdout, lineterminator="\n")
    wr.writerow(["op", "phase", "shape", "iters", "median_s", "p10_s", "p90_s"])
    wr.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------- sweep

def cmd_sweep(args) -> int:
    from .data import load_volume
    from .inference import TILE, depth_activation_sweep, write_sweep_csv
    from .network import load_checkpoint
    started = _now()
    model, _ = load_checkpoint(args.ckpt)
    vol = load_volume(args.volume)
    y, x = args.region
    size = args.size
    _, h, w = vol.shape
    if y < 0 or x < 0 or y + size > h or x + size > w:
        raise ValueError(f"region {size}x{size} at ({y},{x}) outside the {h}x{w} volume")
    mat = depth_activation_sweep(vol.voxels[:, y:y + size, x:x + size], model, args.layer)
    out = Path(args.out)
    write_sweep_csv(out, mat)
    RunManifest("sweep", {"ckpt": str(args.ckpt), "volume": str(args.volume), "region": [y, x],
                          "size": size, "layer": args.layer or "default"},
                [model.config.seed], [out.name], build_id(), started, _now()
                ).write(_manifest_path(out, False))
    print(f"wrote {out} ({mat.shape[0]} rows x {mat.shape[1]} columns)")
    return EXIT_OK


# ---------------------------------------------------------------- ablate

# (table, row label, cmd_train flags); the unflagged run is the full method
ABLATION_ROWS = [
    ("augmentation", "none", ["--no-dihedral", "--no-randcrop", "--no-chdrop"]),
    ("augmentation", "dihedral", ["--no-randcrop", "--no-chdrop"]),
    ("augmentation", "dihedral+crop", ["--no-chdrop"]),
    ("augmentation", "dihedral+crop+chdrop", []),
    ("loss", "dice", ["--loss", "dice"]),
    ("loss", "wbce w=1", ["--loss", "wbce", "--ink-weight", "1"]),
    ("loss", "wbce+dice w=5", ["--loss", "both", "--ink-weight", "5"]),
    ("loss", "wbce+dice w=2", ["--loss", "both", "--ink-weight", "2"]),
    ("loss", "wbce+dice w=1", ["--loss", "both", "--ink-weight", "1"]),
    ("bottleneck", "none", ["--bottleneck", "none"]),
    ("bottleneck", "stffc", ["--bottleneck", "stffc"]),
    ("bottleneck", "conv3d", ["--bottleneck", "conv3d"]),
    ("bottleneck", "vffc", ["--bottleneck", "vffc"]),
]
ABLATION_HEADER = ["table", "row", "dihedral", "random_crop", "channel_dropout", "loss", "ink_weight",
                   "bottleneck", "best_epoch", "f_beta", "pfm", "psnr"]


def cmd_ablate(args) -> int:
    started = _now()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tables = set(args.tables)
    rows = []
    parser = build_parser()
    for i, (table, label, flags) in enumerate(ABLATION_ROWS):
        if table not in tables:
            continue
        argv = ["train", "--data", *args.data, "--val", *args.val, "--out", str(out / f"run_{i:02d}"),
                *flags]
        if args.config:
            argv += ["--config", args.config]
        if args.epochs is not None:
            argv += ["--epochs", str(args.epochs)]
        if args.seed is not None:
            argv += ["--seed", str(args.seed)]
        cfg, result = run_training(parser.parse_args(argv), quiet=True)
        best = max(result.history, key=lambda r: r["val_f_beta"]) if result.history else None
        rows.append([table, label, cfg.dihedral, cfg.random_crop, cfg.channel_dropout, cfg.loss,
                     cfg.ink_weight, cfg.bottleneck, result.best_epoch,
                     *(_fmt_metric(best[k]) if best else "" for k in ("val_f_beta", "val_pfm", "val_psnr"))])
        print(f"{table:12s} {label:22s} f_beta={rows[-1][-3]}", flush=True)
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ABLATION_HEADER)
        w.writerows(rows)
    RunManifest("ablate", {"tables": sorted(tables), "config": args.config, "epochs": args.epochs},
                [args.seed] if args.seed is not None else [], [csv_path.name], build_id(),
                started, _now()).write(out / "manifest.json")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="vffc", description="Volumetric FFC ink-detection toolkit")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic fragment")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=lambda s: _ints(s, 3), default=(24, 512, 512))
    p.add_argument("--delta", type=float, default=1.0)
    p.add_argument("--strokes", type=int, default=36)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--val", nargs="+", required=True)
    p.add_argument("--out", required=True)
    add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="tiled inference on a volume")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--prob-out")
    p.add_argument("--raw", help="also write exact probabilities as a tensor container")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--depth-start", type=int)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score a predicted map")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=0.5)
    p.add_argument("--name")
    p.add_argument("--prob-psnr", action="store_true", help="PSNR on the unthresholded map")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bench", help="time an operator")
    p.add_argument("--op", choices=("vffc", "stffc", "sffc", "conv3d"), required=True)
    p.add_argument("--shape", type=lambda s: _ints(s, 5), required=True)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("sweep", help="depth-activation sweep")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--region", type=lambda s: tuple(int(v) for v in s.split(",")), required=True)
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--layer")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run the ablation flag matrix")
    p.add_argument("--data", nargs="+", required=True)
    p.add_argument("--val", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--tables", nargs="+", default=["augmentation", "loss", "bottleneck"],
                   choices=("augmentation", "loss", "bottleneck"))
    p.set_defaults(func=cmd_ablate)
    return ap


def main(argv=None) -> int:
    from .config import ConfigError
    from .data import FormatError
    from .tensor import NonFiniteError
    from .train import TrainingAborted
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"vffc {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteError, TrainingAborted, FloatingPointError) as exc:
        print(f"vffc {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, FileNotFoundError, ValueError, OSError) as exc:
        print(f"vffc {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
