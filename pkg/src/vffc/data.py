"""Volumes, masks, synthetic fragments, lattice sampling and D4 augmentation."""
from __future__ import annotations

import os
import re
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

SLICE_RE = re.compile(r"^slice_(\d{4,})\.pgm$")


class FormatError(ValueError):
    """Malformed or inconsistent on-disk data."""


# ---------------------------------------------------------------- PGM

def write_pgm(path, img: np.ndarray, maxval: int) -> None:
    """Binary P5 writer; 16-bit samples are big-endian per the PGM spec."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("PGM images are 2D")
    h, w = img.shape
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img, dtype=dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (integer image, maxval)."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: truncated PGM header")
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise FormatError(f"{path}: malformed PGM header") from None
    if not 0 < maxval < 65536 or w <= 0 or h <= 0:
        raise FormatError(f"{path}: bad PGM dimensions or maxval")
    pos += 1  # single whitespace after maxval
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = w * h * np.dtype(dtype).itemsize
    raw = data[pos:pos + nbytes]
    if len(raw) != nbytes:
        raise FormatError(f"{path}: truncated PGM payload")
    return np.frombuffer(raw, dtype=dtype).reshape(h, w).astype(np.int64), maxval


# ---------------------------------------------------------------- volumes

@dataclass
class FragmentVolume:
    voxels: np.ndarray  # (D, H, W) in [0, 1]
    source: str = ""
    voxel_size_um: float = 3.24

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.voxels.shape

    @property
    def slices(self) -> int:
        return self.voxels.shape[0]


@dataclass
class InkMask:
    labels: np.ndarray  # (H, W) in {0, 1}

    @property
    def prevalence(self) -> float:
        return float(self.labels.mean())


def read_meta(path) -> dict[str, str]:
    meta = {}
    for i, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{i}: expected 'key = value'")
        k, v = line.split("=", 1)
        meta[k.strip()] = v.strip()
    return meta


def load_volume(path) -> FragmentVolume:
    """Stack ``slice_NNNN.pgm`` files in filename order, scaled to [0, 1]."""
    root = Path(path)
    if not root.is_dir():
        raise FormatError(f"{root}: not a volume directory")
    names = sorted((n for n in os.listdir(root) if SLICE_RE.match(n)),
                   key=lambda n: int(SLICE_RE.match(n).group(1)))
    if not names:
        raise FormatError(f"{root}: no slice_NNNN.pgm files")
    idx = [int(SLICE_RE.match(n).group(1)) for n in names]
    if idx != list(range(len(idx))):
        missing = sorted(set(range(max(idx) + 1)) - set(idx))
        raise FormatError(f"{root}: missing slice(s) {missing[:5]}")
    meta = {}
    if (root / "volume.meta").exists():
        meta = read_meta(root / "volume.meta")
    slices = []
    shape = None
    for n in names:
        img, maxval = read_pgm(root / n)
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise FormatError(f"{root / n}: slice is {img.shape}, expected {shape}")
        slices.append(img / float(maxval))
    vox = np.stack(slices)
    if meta:
        for key, val in (("slices", vox.shape[0]), ("height", vox.shape[1]), ("width", vox.shape[2])):
            if key in meta and int(meta[key]) != val:
                raise FormatError(f"{root}/volume.meta: {key} = {meta[key]} but data has {val}")
    return FragmentVolume(vox, str(root), float(meta.get("voxel_size_um", 3.24)))


def save_volume(path, vol: FragmentVolume) -> None:
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    q = np.round(np.clip(vol.voxels, 0, 1) * 65535).astype(np.int64)
    for i, sl in enumerate(q):
        write_pgm(root / f"slice_{i:04d}.pgm", sl, 65535)
    d, h, w = vol.shape
    (root / "volume.meta").write_text(
        f"slices = {d}\nheight = {h}\nwidth = {w}\nvoxel_size_um = {vol.voxel_size_um}\n",
        encoding="utf-8")


def save_inkmap(m: np.ndarray, path) -> None:
    """Write a [0, 1] map as 8-bit grayscale (binary maps roundtrip exactly)."""
    write_pgm(path, np.round(np.clip(m, 0, 1) * 255).astype(np.int64), 255)


def load_inkmap(path) -> np.ndarray:
    img, maxval = read_pgm(path)
    return img / float(maxval)


def load_mask(path) -> InkMask:
    return InkMask((load_inkmap(path) >= 0.5).astype(np.float64))


MASK_NAME = "inklabels.pgm"
QUARTER_MASK_NAME = "inklabels_q4.pgm"


def load_fragment(path) -> tuple[FragmentVolume, InkMask]:
    vol = load_volume(path)
    mask_path = Path(path) / MASK_NAME
    if not mask_path.exists():
        raise FormatError(f"{path}: missing {MASK_NAME}")
    mask = load_mask(mask_path)
    if mask.labels.shape != vol.shape[1:]:
        raise FormatError(f"{mask_path}: mask {mask.labels.shape} vs volume {vol.shape[1:]}")
    return vol, mask


# ---------------------------------------------------------------- synthesis

@dataclass
class SynthParams:
    size: tuple[int, int, int] = (24, 512, 512)
    n_fibers: tuple[int, int] = (2, 4)  # sinusoids per orientation family
    fiber_period: tuple[float, float] = (4.0, 12.0)
    fiber_amplitude: float = 0.05
    noise: float = 0.05
    strokes: int = 36
    stroke_width: tuple[float, float] = (4.0, 10.0)
    delta: float = 1.0  # texture contrast of ink: 0 = no signal, 1 = fully smoothed
    smooth_sigma: float = 2.0
    density_shift: float = 0.005  # per unit delta, well below the noise level
    band: tuple[int, int] | None = None  # ink depth band, default the central third
    max_prevalence: float = 0.6


def _polyline_mask(h: int, w: int, rng: np.random.Generator, p: SynthParams) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    out = np.zeros((h, w), dtype=bool)
    for _ in range(p.strokes):
        width = rng.uniform(*p.stroke_width)
        pt = rng.uniform([0, 0], [h, w])
        ang = rng.uniform(0, 2 * np.pi)
        for _ in range(int(rng.integers(2, 5))):
            ang += rng.uniform(-1.2, 1.2)
            length = rng.uniform(20, 70)
            nxt = np.clip(pt + length * np.array([np.sin(ang), np.cos(ang)]), 0, [h - 1, w - 1])
            # distance to segment pt -> nxt, restricted to its bounding box
            r = width / 2 + 1
            y0, y1 = int(max(0, min(pt[0], nxt[0]) - r)), int(min(h, max(pt[0], nxt[0]) + r + 1))
            x0, x1 = int(max(0, min(pt[1], nxt[1]) - r)), int(min(w, max(pt[1], nxt[1]) + r + 1))
            py, px = yy[y0:y1, x0:x1], xx[y0:y1, x0:x1]
            d = nxt - pt
            denom = max(float(d @ d), 1e-12)
            t = np.clip(((py - pt[0]) * d[0] + (px - pt[1]) * d[1]) / denom, 0, 1)
            dist2 = (py - pt[0] - t * d[0]) ** 2 + (px - pt[1] - t * d[1]) ** 2
            out[y0:y1, x0:x1] |= dist2 <= (width / 2) ** 2
            pt = nxt
    return out


def synth_fragment(seed: int, params: SynthParams | None = None) -> tuple[FragmentVolume, InkMask]:
    """Pseudo-periodic fibre texture with ink encoded as local smoothing.

    Inside the ink mask and the depth band, the texture is blended toward a
    low-passed copy by ``delta`` and brightened by ``delta * density_shift``;
    the mean barely moves, so intensity alone does not reveal ink.
    """
    p = params or SynthParams()
    rng = np.random.default_rng(seed)
    d, h, w = p.size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    vol = np.full((d, h, w), 0.5)
    for base in (0.0, np.pi / 2):  # two fibre layers, roughly orthogonal
        for _ in range(int(rng.integers(p.n_fibers[0], p.n_fibers[1] + 1))):
            theta = base + rng.normal(0, 0.12)
            period = rng.uniform(*p.fiber_period)
            amp = p.fiber_amplitude * rng.uniform(0.5, 1.0)
            phase = rng.uniform(0, 2 * np.pi)
            drift = rng.normal(0, 0.3)
            proj = 2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period
            for z in range(d):
                vol[z] += amp * np.sin(proj + phase + drift * z)
    vol += rng.normal(0, p.noise, size=vol.shape)

    for _ in range(100):
        ink = _polyline_mask(h, w, rng, p)
        if ink.mean() <= p.max_prevalence:
            break
    else:
        raise RuntimeError("could not draw strokes under the prevalence cap")

    z0, z1 = p.band if p.band is not None else (d // 3, d - d // 3)
    if p.delta != 0:
        band = vol[z0:z1]
        smooth = ndimage.gaussian_filter(band, sigma=(0, p.smooth_sigma, p.smooth_sigma), mode="reflect")
        mixed = (1 - p.delta) * band + p.delta * smooth + p.delta * p.density_shift
        band[:, ink] = mixed[:, ink]
    vox = np.round(np.clip(vol, 0, 1) * 65535) / 65535
    return FragmentVolume(vox, f"synth:{seed}"), InkMask(ink.astype(np.float64))


def save_fragment(path, vol: FragmentVolume, mask: InkMask) -> None:
    save_volume(path, vol)
    save_inkmap(mask.labels, Path(path) / MASK_NAME)
    save_inkmap(quarter_truth(mask.labels), Path(path) / QUARTER_MASK_NAME)


# ---------------------------------------------------------------- lattice and samples

@dataclass(frozen=True)
class LatticeCell:
    origin: tuple[int, int, int]
    size: tuple[int, int, int]
    fragment: int = 0


def _axis_origins(n: int, cell: int, stride: int) -> list[int]:
    out = list(range(0, n - cell + 1, stride))
    if out[-1] + cell < n:
        out.append(n - cell)  # clamp the boundary cell inward
    return out


def build_lattice(shape, cell=(32, 512, 512), stride: int = 64, fragment: int = 0) -> list[LatticeCell]:
    """Cells tile depth without overlap and slide spatially by ``stride``."""
    shape = tuple(shape.shape if isinstance(shape, FragmentVolume) else shape)
    if any(c > s for c, s in zip(cell, shape)):
        raise ValueError(f"cell {tuple(cell)} larger than volume {shape}")
    zs = _axis_origins(shape[0], cell[0], cell[0])
    ys = _axis_origins(shape[1], cell[1], stride)
    xs = _axis_origins(shape[2], cell[2], stride)
    return [LatticeCell((z, y, x), tuple(cell), fragment) for z in zs for y in ys for x in xs]


@dataclass
class FragmentSample:
    volume: np.ndarray  # (d, h, w)
    mask: np.ndarray  # (h, w) full-resolution labels
    fragment: int
    origin: tuple[int, int, int]
    transforms: tuple[str, ...] = field(default_factory=tuple)

    @property
    def target(self) -> np.ndarray:
        return mask_downscale4(self.mask)

    def provenance(self) -> str:
        t = "+".join(self.transforms) or "e"
        return f"fragment={self.fragment} origin={self.origin} transforms={t}"


def sample_subvolume(cell: LatticeCell, volume: FragmentVolume, mask: InkMask,
                     size=(16, 256, 256), rng: np.random.Generator | None = None,
                     random_crop: bool = True) -> FragmentSample:
    if any(s > c for s, c in zip(size, cell.size)):
        raise ValueError(f"subvolume {tuple(size)} does not fit cell {cell.size}")
    slack = [c - s for c, s in zip(cell.size, size)]
    if random_crop:
        off = [int(rng.integers(0, sl + 1)) for sl in slack]
    else:
        off = [sl // 2 for sl in slack]
    z, y, x = (o + f for o, f in zip(cell.origin, off))
    d, h, w = size
    return FragmentSample(volume.voxels[z:z + d, y:y + h, x:x + w].copy(),
                          mask.labels[y:y + h, x:x + w].copy(), cell.fragment, (z, y, x))


D4 = ("e", "r90", "r180", "r270", "flipH", "flipV", "transpose", "antitranspose")


def d4_apply(a: np.ndarray, g: str) -> np.ndarray:
    """Apply a square symmetry to the last two axes."""
    if g == "e":
        return a
    if g in ("r90", "r270", "transpose", "antitranspose") and a.shape[-1] != a.shape[-2]:
        raise ValueError(f"{g} needs square spatial dims, got {a.shape[-2:]}")
    if g == "r90":
        return np.rot90(a, 1, axes=(-2, -1))
    if g == "r180":
        return np.rot90(a, 2, axes=(-2, -1))
    if g == "r270":
        return np.rot90(a, 3, axes=(-2, -1))
    if g == "flipH":
        return a[..., ::-1]
    if g == "flipV":
        return a[..., ::-1, :]
    if g == "transpose":
        return np.swapaxes(a, -1, -2)
    if g == "antitranspose":
        return np.rot90(np.swapaxes(a, -1, -2), 2, axes=(-2, -1))
    raise ValueError(f"unknown D4 element {g!r}")


def d4_transform(sample: FragmentSample, g: str) -> FragmentSample:
    return replace(sample,
                   volume=np.ascontiguousarray(d4_apply(sample.volume, g)),
                   mask=np.ascontiguousarray(d4_apply(sample.mask, g)),
                   transforms=sample.transforms + ((g,) if g != "e" else ()))


def mask_downscale4(m: np.ndarray) -> np.ndarray:
    """Mean over each 4x4 block: a soft target at quarter resolution."""
    m = np.asarray(m, dtype=np.float64)
    h, w = m.shape[-2:]
    if h % 4 or w % 4:
        raise ValueError(f"mask dims {m.shape[-2:]} not divisible by 4")
    return m.reshape(m.shape[:-2] + (h // 4, 4, w // 4, 4)).mean(axis=(-3, -1))


def quarter_truth(m: np.ndarray) -> np.ndarray:
    """Binary ground truth at quarter resolution (block majority, ties to ink)."""
    return (mask_downscale4(m) >= 0.5).astype(np.float64)


def mean_intensity_baseline(volume: FragmentVolume, prevalence: float,
                            depth_window: tuple[int, int] | None = None) -> np.ndarray:
    """Mark the brightest ``prevalence`` fraction of quarter-res blocks as ink."""
    v = volume.voxels if depth_window is None else volume.voxels[depth_window[0]:depth_window[1]]
    score = mask_downscale4(v.mean(axis=0))
    if prevalence <= 0:
        return np.zeros_like(score)
    thr = np.quantile(score, 1 - prevalence)
    return (score >= thr).astype(np.float64)
