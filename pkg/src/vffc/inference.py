"""Tiled whole-fragment prediction and the depth-activation sweep."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .network import InkNet
from .tensor import Tensor, backward, no_grad, sigmoid

TILE = 256
TILE_STRIDE = 128


def _axis_plan(n: int, tile: int, stride: int) -> list[tuple[int, int, int]]:
    """(origin, keep_start, keep_stop) per tile along one axis.

    Interior tiles keep their central ``stride`` pixels; the first and last
    tiles extend their kept span to the border so coverage is exact.
    """
    if n < tile:
        raise ValueError(f"axis of {n} pixels is smaller than one {tile} tile")
    origins = list(range(0, n - tile + 1, stride))
    if origins[-1] + tile < n:
        origins.append(n - tile)
    margin = (tile - stride) // 2
    out = []
    start = 0
    for i, o in enumerate(origins):
        stop = n if i == len(origins) - 1 else o + tile - margin
        out.append((o, start, stop))
        start = stop
    return out


@dataclass(frozen=True)
class StitchPlan:
    height: int
    width: int
    tile: int = TILE
    stride: int = TILE_STRIDE
    scale: int = 4

    def __post_init__(self):
        for v in (self.height, self.width, self.tile, self.stride):
            if v % self.scale:
                raise ValueError(f"plan sizes must be divisible by {self.scale}")

    @property
    def rows(self):
        return _axis_plan(self.height, self.tile, self.stride)

    @property
    def cols(self):
        return _axis_plan(self.width, self.tile, self.stride)

    @property
    def origins(self) -> list[tuple[int, int]]:
        return [(r[0], c[0]) for r in self.rows for c in self.cols]

    def tiles(self):
        """Yield (y, x, map-space destination slices, tile-local source slices)."""
        s = self.scale
        for oy, y0, y1 in self.rows:
            for ox, x0, x1 in self.cols:
                dst = (slice(y0 // s, y1 // s), slice(x0 // s, x1 // s))
                src = (slice((y0 - oy) // s, (y1 - oy) // s), slice((x0 - ox) // s, (x1 - ox) // s))
                yield oy, ox, dst, src

    def coverage(self) -> np.ndarray:
        s = self.scale
        cov = np.zeros((self.height // s, self.width // s), dtype=np.int64)
        for _, _, dst, _ in self.tiles():
            cov[dst] += 1
        return cov


def default_depth_window(slices: int, depth: int = 16) -> tuple[int, int]:
    if slices < depth:
        raise ValueError(f"volume has {slices} slices, model needs {depth}")
    z0 = (slices - depth) // 2
    return z0, z0 + depth


def tile_predict(voxels: np.ndarray, model, depth_window: tuple[int, int] | None = None,
                 order: list[int] | None = None) -> np.ndarray:
    """Probability map at quarter resolution, stitched from inner tile crops.

    ``model`` maps an (1, D, 256, 256, 1) array to (1, 64, 64, 1) logits; an
    InkNet is put in eval mode.  ``order`` permutes tile visitation.
    """
    voxels = np.asarray(voxels, dtype=np.float64)
    if voxels.ndim != 3:
        raise ValueError(f"expected a (D, H, W) volume, got {voxels.shape}")
    if isinstance(model, InkNet):
        model.eval()
        depth = model.config.input_depth
    else:
        depth = voxels.shape[0] if depth_window is None else depth_window[1] - depth_window[0]
    z0, z1 = depth_window or default_depth_window(voxels.shape[0], depth)
    if not 0 <= z0 < z1 <= voxels.shape[0]:
        raise ValueError(f"depth window {(z0, z1)} outside volume of {voxels.shape[0]} slices")
    plan = StitchPlan(voxels.shape[1], voxels.shape[2])
    out = np.full((plan.height // 4, plan.width // 4), np.nan)
    tiles = list(plan.tiles())
    for i in order if order is not None else range(len(tiles)):
        y, x, dst, src = tiles[i]
        x_in = voxels[z0:z1, y:y + TILE, x:x + TILE][None, ..., None]
        with no_grad():
            logits = model(Tensor(x_in))
        probs = sigmoid(logits).data if isinstance(logits, Tensor) else 1 / (1 + np.exp(-logits))
        out[dst] = probs[0, ..., 0][src]
    return out


SWEEP_LAYERS = ("input", "stem", "bottleneck")


def depth_activation_sweep(voxels: np.ndarray, model: InkNet, layer: str | None = None) -> np.ndarray:
    """Slide a model-depth window over z and record per-slice relevance.

    Relevance of a 3D layer is the spatial/channel mean of
    relu(d sum(logits) / dA) * A per layer depth slice, spread back to the
    input slices it covers.  Returns a (D_total, D_total - depth + 1) matrix,
    rows = absolute z, columns = window start.
    """
    voxels = np.asarray(voxels, dtype=np.float64)
    depth = model.config.input_depth
    n_stages = len(model.config.widths)
    layer = layer or f"stage{n_stages}"
    valid = SWEEP_LAYERS + tuple(f"stage{i + 1}" for i in range(n_stages))
    if layer not in valid:
        raise ValueError(f"layer {layer!r} is not a 3D layer; choose from {valid}")
    d_total = voxels.shape[0]
    if d_total < depth:
        raise ValueError(f"volume has {d_total} slices, model needs {depth}")
    model.eval()
    cols = d_total - depth + 1
    mat = np.zeros((d_total, cols))
    for z in range(cols):
        x = Tensor(voxels[z:z + depth][None, ..., None], requires_grad=(layer == "input"))
        record: dict = {"input": x}
        out = model(x, record)
        act = record[layer]
        if not out.requires_grad:
            continue  # nothing trainable on the path: zero relevance
        grads = backward(out.sum(), inputs=[act])
        model.zero_grad()
        g = grads.get(act)
        if g is None:
            continue
        rel = (np.maximum(g, 0) * act.data).mean(axis=(0, 2, 3, 4))
        idx = (np.arange(depth) * rel.shape[0]) // depth
        mat[z:z + depth, z] = rel[idx]
    return mat


def write_sweep_csv(path, mat: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["z"] + [f"start_{j}" for j in range(mat.shape[1])])
        for z, row in enumerate(mat):
            w.writerow([z] + [repr(float(v)) for v in row])
