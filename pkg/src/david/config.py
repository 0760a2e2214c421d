"""Training configuration schema.

Every key lives on :class:`PhaseConfig` with its help text in the field
metadata; YAML files, ``--set key=value`` overrides and the CLI help are all
derived from it.
"""

import dataclasses
from dataclasses import dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import yaml


class ConfigError(ValueError):
    pass


def _f(default, help, **kw):
    return field(default=default, metadata={"help": help, **kw})


PHASE_DEFAULTS = {
    1: {"freeze_epochs": 0, "total_epochs": 1000},
    2: {"freeze_epochs": 100, "total_epochs": 300},
    3: {"freeze_epochs": 200, "total_epochs": 400},
}


@dataclass
class PhaseConfig:
    phase: int = _f(1, "training phase: 1 backbone pre-train, 2 internal module, 3 full model")
    initial_lr: float = _f(1e-5, "learning rate of the first stage")
    fine_tune_lr: float = _f(2e-6, "learning rate once frozen parts are released (phases 2 and 3)")
    freeze_epochs: int = _f(None, "epochs before unfreezing (default 0 / 100 / 200 for phases 1 / 2 / 3)")
    total_epochs: int = _f(None, "epoch budget over all stages (default 1000 / 300 / 400)")
    decay_factor: float = _f(0.96, "multiplicative lr decay")
    decay_period: int = _f(100, "epochs between lr decays, counted from the start of each stage")
    batch_size: int = _f(16, "samples per optimizer step")
    micro_batch: int = _f(0, "gradient-accumulation chunk size (0: whole batch at once)")
    patience: int = _f(50, "stop when val PSNR has not improved for this many epochs (0 disables)")
    crop: int = _f(128, "random crop size, a multiple of 16; clamped to the frame size")
    flips: bool = _f(True, "random horizontal and vertical flips")
    steps_per_epoch: int = _f(0, "optimizer steps per epoch (0: one pass over the training set)")
    seed: int = _f(0, "seed for initialization, batch order and augmentation")
    phase3_stages: int = _f(2, "phase 3 staging: 2 (external, then all) or 3 (external, attention, all)")
    attention_epochs: int = _f(200, "length of the attention-only stage when phase3_stages is 3")
    frames: int = _f(7, "phase 1: stacked frames of the branch (1, 3, 5, 7, ...)")
    blur_level: int = _f(7, "phase 1/2: blur subset C-DVD-w the branch or module trains on (0: all)")
    blur_levels: list = _f((3, 7, 11), "phase 3: blur level of each internal module")
    n_branches: int = _f(4, "backbone branches per internal module")
    channel_scale: str = _f("1", "backbone channel width multiplier, e.g. 1/8")
    attention_scale: str = _f("", "attention branch width multiplier (empty: same as channel_scale)")
    train_windows: list = _f((), "phase 3: blur windows used for training (empty: all)")
    val_batch_size: int = _f(8, "batch size for validation passes")
    dtype: str = _f("float32", "parameter and activation dtype", choices=("float32", "float64"))

    def __post_init__(self):
        defaults = PHASE_DEFAULTS.get(self.phase)
        if defaults is None:
            raise ConfigError(f"phase must be 1, 2 or 3, got {self.phase}")
        if self.freeze_epochs is None:
            self.freeze_epochs = defaults["freeze_epochs"]
        if self.total_epochs is None:
            self.total_epochs = defaults["total_epochs"]
            if self.phase == 3 and self.phase3_stages == 3:
                self.total_epochs = self.freeze_epochs + self.attention_epochs + 200
        self.blur_levels = tuple(int(b) for b in self.blur_levels)
        self.train_windows = tuple(int(w) for w in self.train_windows)
        self.validate()

    def validate(self):
        if self.total_epochs <= 0:
            raise ConfigError("total_epochs must be positive")
        if self.phase > 1:
            if self.freeze_epochs <= 0:
                raise ConfigError("freeze_epochs must be positive in phases 2 and 3")
            tail = self.total_epochs - self.freeze_epochs
            if self.phase == 3 and self.phase3_stages == 3:
                tail -= self.attention_epochs
                if self.attention_epochs <= 0:
                    raise ConfigError("attention_epochs must be positive")
            if tail <= 0:
                raise ConfigError("total_epochs must exceed the frozen stages")
            if not self.fine_tune_lr < self.initial_lr:
                raise ConfigError("fine_tune_lr must be smaller than initial_lr")
        for key in ("initial_lr", "fine_tune_lr"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive")
        for key in ("batch_size", "decay_period", "val_batch_size", "n_branches"):
            if getattr(self, key) <= 0:
                raise ConfigError(f"{key} must be positive")
        if self.micro_batch < 0 or self.steps_per_epoch < 0 or self.patience < 0:
            raise ConfigError("micro_batch, steps_per_epoch and patience must be non-negative")
        if self.crop <= 0 or self.crop % 16:
            raise ConfigError(f"crop must be a positive multiple of 16, got {self.crop}")
        if self.phase3_stages not in (2, 3):
            raise ConfigError("phase3_stages must be 2 or 3")
        if self.frames < 1 or self.frames % 2 == 0:
            raise ConfigError("frames must be odd and positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        self.scale
        return self

    @property
    def scale(self):
        try:
            return Fraction(str(self.channel_scale))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad channel_scale {self.channel_scale!r}") from exc

    @property
    def att_scale(self):
        return Fraction(str(self.attention_scale)) if str(self.attention_scale) else self.scale

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["blur_levels"] = list(self.blur_levels)
        d["train_windows"] = list(self.train_windows)
        return d

    def replace(self, **kw):
        d = self.to_dict()
        d.update(kw)
        return from_dict(d)


def schema():
    return {f.name: f for f in fields(PhaseConfig)}


def from_dict(d):
    known = schema()
    unknown = sorted(set(d) - set(known))
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(unknown)}")
    return PhaseConfig(**{k: _coerce(known[k], v) for k, v in d.items()})


def _coerce(f, value):
    if value is None:
        return None
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    try:
        if kind == "bool":
            if isinstance(value, str):
                v = value.strip().lower()
                if v not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(value)
                return v in ("1", "true", "yes", "on")
            return bool(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        if kind == "list":
            if isinstance(value, str):
                return tuple(int(x) for x in value.replace(" ", "").split(",") if x)
            return tuple(int(x) for x in value)
        return str(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad value {value!r} for {f.name} ({kind})") from exc


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        key = key.strip().replace("-", "_")
        if key not in schema():
            raise ConfigError(f"unknown config key: {key}")
        out[key] = yaml.safe_load(value) if value.strip() else ""
    return out


def load_config(path=None, overrides=(), **explicit):
    """File values, then ``explicit`` (CLI flags), then ``--set`` overrides."""
    d = {}
    if path:
        data = yaml.safe_load(Path(path).read_text()) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        d.update(data)
    d.update({k: v for k, v in explicit.items() if v is not None})
    d.update(parse_overrides(overrides))
    return from_dict(d)


def dump_config(cfg):
    return yaml.safe_dump(cfg.to_dict(), sort_keys=True)


def help_text():
    lines = ["config keys (YAML file or --set key=value):"]
    for f in fields(PhaseConfig):
        default = f.default
        if isinstance(default, tuple):
            default = ",".join(map(str, default)) or "(empty)"
        lines.append(f"  {f.name} (default {default}): {f.metadata['help']}")
    return "\n".join(lines)
