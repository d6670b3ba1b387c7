"""Run configuration: defaults, flat ``key = value`` files and fingerprints.

Precedence is defaults < config file < command-line flags.
"""

import dataclasses
import hashlib
from dataclasses import dataclass, fields

from .vit import ViTConfig


@dataclass(frozen=True)
class RunConfig:
    # architecture
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    encoder_depth: int = 4
    decoder_depth: int = 2
    num_heads: int = 4
    mlp_ratio: int = 4
    decoder_dim: int = 32
    # optimisation (AdamW, linear warmup then cosine decay)
    lr: float = 1e-3
    head_lr: float = 6e-3
    batch_size: int = 16
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.95
    warmup_epochs: int = 4
    pretrain_epochs: int = 30
    stage1_epochs: int = 30
    adapt_epochs: int = 30
    # masking and stage 2
    mask_ratio: float = 0.75
    l_pretrain: int = 1
    l_train: int = 2
    l_test: int = 4
    k: float = 50.0
    shared_test_masks: bool = False
    reconstruction: str = "composite"  # or "decoder": decoder output at every pixel
    stage1_val_fraction: float = 0.1
    stage1_augmentations: int = 4
    # data
    n: int = 200
    m: int = 200
    s: int = 200
    anomaly_ratio: float = 0.6
    seeds: tuple = (0, 1, 2, 3)

    def __post_init__(self):
        if self.reconstruction not in ("composite", "decoder"):
            raise ValueError(f"reconstruction must be 'composite' or 'decoder', got {self.reconstruction!r}")
        if not 0 < self.k <= 100:
            raise ValueError(f"K must lie in (0, 100], got {self.k}")
        self.vit  # validates geometry

    @property
    def vit(self):
        return ViTConfig(**{f.name: getattr(self, f.name) for f in fields(ViTConfig)})

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def to_text(self):
        return "".join(f"{f.name} = {_format(getattr(self, f.name))}\n" for f in fields(self))

    def fingerprint(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    @classmethod
    def from_text(cls, text, base=None):
        base = base or cls()
        return base.replace(**parse_config_text(text))

    @classmethod
    def from_file(cls, path, base=None):
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read(), base)


def full_schedule(config):
    """The full-length schedule: 20 warmup epochs, 150 total."""
    return config.replace(warmup_epochs=20, pretrain_epochs=150, stage1_epochs=150, adapt_epochs=150)


def _format(value):
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def coerce(key, raw):
    if key not in _TYPES:
        raise KeyError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    raw = raw.strip()
    if kind in (bool, "bool"):
        lowered = raw.lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{key}: expected a boolean, got {raw!r}")
        return lowered in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    if kind in (tuple, "tuple"):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    return raw


def parse_config_text(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        key, sep, raw = stripped.partition("=")
        if not sep:
            raise ValueError(f"config line {lineno}: expected 'key = value', got {line!r}")
        try:
            values[key.strip()] = coerce(key.strip(), raw)
        except (KeyError, ValueError) as exc:
            raise ValueError(f"config line {lineno}: {exc}") from None
    return values
