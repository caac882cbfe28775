"""Encoder / bottleneck / decoder ink-detection network.

Stride schedule: a stem convolution applies the first spatial stride (4 by
default) together with a depth stride; every later stage opens with a
strided residual block.  The decoder upsamples once per encoder stage after
the first, fusing the depth-averaged skip of the matching stage, then adds
one non-upsampling block, so logits come out at 1/stem-stride resolution.
"""
from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .ffc import FFCResidualBlock
from .nn import BatchNorm, Conv, Module, bilinear_up2, depth_mean, drop_path
from .tensor import Tensor, concat, read_tensor, relu, write_tensor

BOTTLENECKS = ("none", "conv3d", "stffc", "vffc")


@dataclass
class NetworkConfig:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    spatial_strides: list[int] = field(default_factory=lambda: [4, 2, 2, 2])
    depth_strides: list[int] = field(default_factory=lambda: [2, 2, 1, 1])
    stem_depth_stride: int = 2
    blocks: list[int] = field(default_factory=lambda: [2, 2, 2, 2])
    bottleneck: str = "vffc"
    bottleneck_blocks: int = 3
    decoder_widths: list[int] | None = None
    output_downscale: int = 4
    input_depth: int = 16
    drop_path: float = 0.1
    global_ratio: float = 0.5
    seed: int = 0

    def __post_init__(self):
        n = len(self.widths)
        if not (len(self.spatial_strides) == len(self.depth_strides) == len(self.blocks) == n):
            raise ValueError("widths, strides and block counts must have equal length")
        if self.bottleneck not in BOTTLENECKS:
            raise ValueError(f"bottleneck must be one of {BOTTLENECKS}")
        if self.decoder_widths is None:
            self.decoder_widths = [self.widths[i] for i in range(n - 2, -1, -1)] + [self.widths[0]]
        if len(self.decoder_widths) != n:
            raise ValueError(f"need {n} decoder widths, got {len(self.decoder_widths)}")
        ups = 2 ** (n - 1)
        if int(np.prod(self.spatial_strides)) != self.output_downscale * ups:
            raise ValueError("encoder stride must equal output downscale times decoder upsampling")
        if self.spatial_strides[0] != self.output_downscale:
            raise ValueError("stem stride must equal the output downscale")
        if any(s != 2 for s in self.spatial_strides[1:]):
            raise ValueError("stages after the stem must stride by 2 to match 2x upsampling")

    @property
    def total_stride(self) -> int:
        return int(np.prod(self.spatial_strides))

    def stage_depths(self, depth: int | None = None) -> list[int]:
        d = self.input_depth if depth is None else depth
        d = max(1, -(-d // self.stem_depth_stride))
        out = []
        for s in self.depth_strides:
            d = max(1, -(-d // s))
            out.append(d)
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        return cls(**json.loads(text))


PRESETS = {
    "desk": dict(widths=[16, 32, 64, 128], blocks=[2, 2, 2, 2]),
    "resnet34": dict(widths=[64, 128, 256, 512], blocks=[3, 4, 6, 3]),
    "tiny": dict(widths=[4, 8], spatial_strides=[4, 2], depth_strides=[2, 1],
                 blocks=[1, 1], input_depth=4, bottleneck_blocks=1),
}


def preset(name: str, **overrides) -> NetworkConfig:
    try:
        base = dict(PRESETS[name])
    except KeyError:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    base.update(overrides)
    return NetworkConfig(**base)


# ---------------------------------------------------------------- blocks

class BasicBlock3d(Module):
    """relu(bn(conv(relu(bn(conv(x))))) + skip(x)), strided first conv."""

    def __init__(self, cin: int, cout: int, stride: tuple[int, int, int], rng):
        self.conv1 = Conv(cin, cout, (3, 3, 3), rng, stride=stride, padding=1)
        self.bn1 = BatchNorm(cout)
        self.conv2 = Conv(cout, cout, (3, 3, 3), rng)
        self.bn2 = BatchNorm(cout)
        if cin != cout or any(s != 1 for s in stride):
            self.down = Conv(cin, cout, (1, 1, 1), rng, stride=stride, padding=0)
            self.down_bn = BatchNorm(cout)
        else:
            self.down = None

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn2(self.conv2(relu(self.bn1(self.conv1(x)))))
        skip = self.down_bn(self.down(x)) if self.down is not None else x
        return relu(y + skip)


class ConvResidualBlock3d(Module):
    """x + drop_path(bn(conv(relu(bn(conv(x)))))), the plain-3D bottleneck."""

    def __init__(self, channels: int, rng, drop_path_rate: float):
        self.conv1 = Conv(channels, channels, (3, 3, 3), rng)
        self.bn1 = BatchNorm(channels)
        self.conv2 = Conv(channels, channels, (3, 3, 3), rng)
        self.bn2 = BatchNorm(channels)
        self.drop_path_rate = drop_path_rate
        self.rng = np.random.default_rng(0)

    def forward(self, x: Tensor) -> Tensor:
        y = self.bn2(self.conv2(relu(self.bn1(self.conv1(x)))))
        return x + drop_path(y, self.drop_path_rate, self.training, self.rng)


class Stage(Module):
    def __init__(self, cin: int, cout: int, count: int, stride, rng):
        self.blocks = [BasicBlock3d(cin, cout, stride, rng)]
        self.blocks += [BasicBlock3d(cout, cout, (1, 1, 1), rng) for _ in range(count - 1)]

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class Encoder3d(Module):
    def __init__(self, cfg: NetworkConfig, rng):
        w0 = cfg.widths[0]
        self.stem = Conv(1, w0, (3, 7, 7), rng,
                         stride=(cfg.stem_depth_stride, cfg.spatial_strides[0], cfg.spatial_strides[0]),
                         padding=(1, 3, 3))
        self.stem_bn = BatchNorm(w0)
        stages = []
        cin = w0
        for i, (w, n) in enumerate(zip(cfg.widths, cfg.blocks)):
            s = 1 if i == 0 else cfg.spatial_strides[i]
            stages.append(Stage(cin, w, n, (cfg.depth_strides[i], s, s), rng))
            cin = w
        self.stages = stages

    def forward(self, x: Tensor, record: dict | None = None) -> list[Tensor]:
        x = relu(self.stem_bn(self.stem(x)))
        if record is not None:
            record["stem"] = x
        feats = []
        for i, st in enumerate(self.stages):
            x = st(x)
            feats.append(x)
            if record is not None:
                record[f"stage{i + 1}"] = x
        return feats


class Bottleneck(Module):
    def __init__(self, cfg: NetworkConfig, rng):
        c = cfg.widths[-1]
        depth = cfg.stage_depths()[-1]
        gc = max(1, int(round(c * cfg.global_ratio)))
        self.kind = cfg.bottleneck
        if cfg.bottleneck == "none":
            self.blocks = []
        elif cfg.bottleneck == "conv3d":
            self.blocks = [ConvResidualBlock3d(c, rng, cfg.drop_path)
                           for _ in range(cfg.bottleneck_blocks)]
        else:
            self.blocks = [FFCResidualBlock(c, rng, cfg.bottleneck, cfg.drop_path, depth=depth,
                                            global_channels=gc)
                           for _ in range(cfg.bottleneck_blocks)]

    def forward(self, x: Tensor) -> Tensor:
        for b in self.blocks:
            x = b(x)
        return x


class DecoderBlock(Module):
    """Optional 2x bilinear upsample, concat skip, conv-BN-ReLU."""

    def __init__(self, cin: int, skip_c: int, cout: int, rng, upsample: bool):
        self.upsample = upsample
        self.conv = Conv(cin + skip_c, cout, (3, 3), rng)
        self.bn = BatchNorm(cout)

    def forward(self, x: Tensor, skip: Tensor | None) -> Tensor:
        if self.upsample:
            x = bilinear_up2(x)
        if skip is not None:
            x = concat([x, skip], -1)
        return relu(self.bn(self.conv(x)))


class Decoder2d(Module):
    def __init__(self, cfg: NetworkConfig, rng):
        n = len(cfg.widths)
        blocks = []
        cin = cfg.widths[-1]
        for j, i in enumerate(range(n - 2, -1, -1)):
            cout = cfg.decoder_widths[j]
            blocks.append(DecoderBlock(cin, cfg.widths[i], cout, rng, upsample=True))
            cin = cout
        blocks.append(DecoderBlock(cin, 0, cfg.decoder_widths[-1], rng, upsample=False))
        self.blocks = blocks
        self.head = Conv(cfg.decoder_widths[-1], 1, (1, 1), rng)

    def forward(self, deep: Tensor, skips: list[Tensor]) -> Tensor:
        x = deep
        for blk, skip in zip(self.blocks, list(reversed(skips)) + [None]):
            x = blk(x, skip)
        return self.head(x)


class InkNet(Module):
    """3D encoder -> bottleneck -> depth-mean -> 2D decoder -> logits at 1/4."""

    def __init__(self, cfg: NetworkConfig):
        self.config = cfg
        # independent streams so encoder/decoder weights do not depend on the bottleneck kind
        self.encoder = Encoder3d(cfg, np.random.default_rng([cfg.seed, 1]))
        self.bottleneck = Bottleneck(cfg, np.random.default_rng([cfg.seed, 2]))
        self.decoder = Decoder2d(cfg, np.random.default_rng([cfg.seed, 3]))

    def check_input(self, x: Tensor) -> None:
        if x.ndim != 5 or x.shape[-1] != 1:
            raise ValueError(f"expected (N, D, H, W, 1) input, got {x.shape}")
        s = self.config.total_stride
        if x.shape[2] % s or x.shape[3] % s:
            raise ValueError(f"H and W must be divisible by {s}, got {x.shape[2:4]}")

    def encode(self, x: Tensor, record: dict | None = None) -> list[Tensor]:
        self.check_input(x)
        return self.encoder(x, record)

    def forward(self, x: Tensor, record: dict | None = None) -> Tensor:
        feats = self.encode(x, record)
        deep = self.bottleneck(feats[-1])
        if record is not None:
            record["bottleneck"] = deep
        skips = [depth_mean(f) for f in feats[:-1]]
        return self.decoder(depth_mean(deep), skips)

    def set_rng(self, rng: np.random.Generator) -> None:
        """Route the stochastic-depth draws of every block through ``rng``."""
        for m in self.modules():
            if hasattr(m, "drop_path_rate"):
                m.rng = rng

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))


def encode3d(x: Tensor, model: InkNet) -> list[Tensor]:
    return model.encode(x)


def bottleneck(deep: Tensor, model: InkNet) -> Tensor:
    return model.bottleneck(deep)


def forward(x: Tensor, model: InkNet) -> Tensor:
    return model(x)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"VFFCCKPT"
CKPT_VERSION = 1


def save_checkpoint(path, model: InkNet, extra: dict | None = None) -> None:
    """Header, version, config digest, config JSON, then named tensors."""
    cfg_json = model.config.to_json().encode()
    meta = json.dumps(extra or {}, sort_keys=True).encode()
    state = model.state_dict()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<I", CKPT_VERSION))
    buf.write(model.config.digest())
    for blob in (cfg_json, meta):
        buf.write(struct.pack("<I", len(blob)))
        buf.write(blob)
    buf.write(struct.pack("<I", len(state)))
    for name in sorted(state):
        nb = name.encode()
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        write_tensor(buf, state[name])
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> tuple[InkNet, dict]:
    with open(path, "rb") as fh:
        if fh.read(8) != CKPT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CKPT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        digest = fh.read(32)
        blobs = []
        for _ in range(2):
            (n,) = struct.unpack("<I", fh.read(4))
            blobs.append(fh.read(n).decode())
        cfg = NetworkConfig.from_json(blobs[0])
        if cfg.digest() != digest:
            raise ValueError(f"{path}: config digest mismatch")
        (count,) = struct.unpack("<I", fh.read(4))
        state = {}
        for _ in range(count):
            (n,) = struct.unpack("<I", fh.read(4))
            name = fh.read(n).decode()
            state[name] = read_tensor(fh)
    model = InkNet(cfg)
    model.load_state_dict(state)
    return model, json.loads(blobs[1])
