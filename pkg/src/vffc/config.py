"""Training configuration and its ``key = value`` file format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from typing import get_type_hints

from .losses import LOSS_MODES
from .network import BOTTLENECKS, PRESETS


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    preset: str = "desk"
    bottleneck: str = "vffc"
    seed: int = 0
    subvolume: tuple[int, int, int] = (16, 256, 256)
    cell: tuple[int, int, int] = (24, 512, 512)
    lattice_stride: int = 64
    cell_repeats: int = 8  # samples drawn per lattice cell per epoch
    epochs: int = 15
    batch_size: int = 2
    loss: str = "both"
    ink_weight: float = 1.0
    dice_eps: float = 1e-6
    verbatim_wbce: bool = False
    lr: float = 0.003
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.01
    adam_eps: float = 1e-8
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div_factor: float = 1e4
    drop_path: float = 0.1
    dihedral: bool = True
    random_crop: bool = True
    channel_dropout: bool = True
    chdrop_rate: float = 0.5
    chdrop_max_fraction: float = 0.5
    threshold: float = 0.5
    val_depth_start: int = -1  # -1: centre the model window in the volume
    extra_network: dict = field(default_factory=dict)

    def __post_init__(self):
        self.subvolume = tuple(int(v) for v in self.subvolume)
        self.cell = tuple(int(v) for v in self.cell)
        self.validate()

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.bottleneck not in BOTTLENECKS:
            raise ConfigError(f"bottleneck must be one of {BOTTLENECKS}")
        if self.loss not in LOSS_MODES:
            raise ConfigError(f"loss must be one of {LOSS_MODES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0 or self.cell_repeats < 1:
            raise ConfigError("epochs must be >= 0 and cell_repeats >= 1")
        if len(self.subvolume) != 3 or len(self.cell) != 3:
            raise ConfigError("subvolume and cell take three sizes (d, h, w)")
        if any(s > c for s, c in zip(self.subvolume, self.cell)):
            raise ConfigError(f"subvolume {self.subvolume} does not fit in cell {self.cell}")

    def network_overrides(self) -> dict:
        out = dict(bottleneck=self.bottleneck, seed=self.seed, drop_path=self.drop_path,
                   input_depth=self.subvolume[0])
        out.update(self.extra_network)
        return out

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def dumps(self) -> str:
        """Serialise to the ``key = value`` format read by :func:`parse_config`."""
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, dict):
                v = json.dumps(v, sort_keys=True)
            elif isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{f.name} = {v}")
        return "\n".join(lines) + "\n"


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _coerce(kind, text: str):
    if kind is bool:
        low = text.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is str:
        return text
    if kind is dict:
        v = json.loads(text)
        if not isinstance(v, dict):
            raise ValueError("expected a JSON object")
        return v
    return tuple(int(p) for p in text.split(","))


def _field_kinds() -> dict[str, type]:
    hints = get_type_hints(TrainConfig)
    kinds = {}
    for name, hint in hints.items():
        kinds[name] = hint if hint in (bool, int, float, str, dict) else tuple
    return kinds


def parse_config(text: str, base: TrainConfig | None = None, source: str = "<config>") -> TrainConfig:
    """Apply ``key = value`` lines over ``base``; ``#`` starts a comment."""
    kinds = _field_kinds()
    values = asdict(base or TrainConfig())
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _coerce(kinds[key], val)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    try:
        return TrainConfig(**values)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), source=str(path))
