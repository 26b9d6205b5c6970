"""Run configuration: a flat ``key = value`` text file with a typed schema.

Blank lines and ``#`` comments are ignored. Unknown keys, duplicate keys and
values that fail conversion are rejected with the offending line number.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

from .core import QuantLevels
from .datasets import FORMATS
from .exceptions import ConfigurationError

DEFAULT_ARCH = "conv:16:3:1,relu,pool:2,conv:32:3:1,relu,pool:2,flatten,linear:64,relu,linear:{classes}"


class ConfigError(ConfigurationError):
    def __init__(self, message, line=None, key=None):
        self.line, self.key = line, key
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


def _floats(text):
    return tuple(float(t) for t in text.replace(";", ",").split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in text.replace(";", ",").split(",") if t.strip())


def _bool(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional(conv):
    def inner(text):
        return None if text.strip().lower() in ("", "none", "null") else conv(text)
    return inner


@dataclass
class RunConfig:
    dataset_path: str | None = None
    dataset_format: str = "synthetic"
    labels_path: str | None = None
    val_fraction: float = 0.25
    synthetic_classes: int = 4
    synthetic_samples: int = 2000
    synthetic_features: int = 64
    arch: str = DEFAULT_ARCH
    weight_levels: str = "ternary"
    activation_levels: str | None = None
    bias_init: str = "kmeans"
    shared_quantizers: bool = False
    temperature_rate: float = 20.0
    pretrain_epochs: int = 20
    pretrain_lr: float = 0.05
    pretrain_lr_decay_epochs: tuple = (12, 17)
    epochs: int = 30
    phase_split: tuple = (0.4, 0.2, 0.4)
    lr: float = 0.01
    lr_decay_epochs: tuple = (18, 25)
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    clip_norm: float | None = 5.0
    max_scale_step: float | None = None
    batch_size: int = 64
    calib_samples: int = 1000
    seed: int = 0
    output_dir: str = "runs/out"

    def validate(self, lines: dict | None = None):
        lines = lines or {}

        def fail(key, msg):
            raise ConfigError(f"{key}: {msg}", lines.get(key), key)

        if self.dataset_format not in FORMATS:
            fail("dataset_format", f"must be one of {', '.join(FORMATS)}")
        if self.dataset_format in ("idx", "csv") and not self.dataset_path:
            fail("dataset_path", f"required for dataset_format = {self.dataset_format}")
        for key in ("weight_levels", "activation_levels"):
            val = getattr(self, key)
            if val is not None:
                try:
                    QuantLevels.from_spec(val)
                except ConfigurationError as exc:
                    fail(key, str(exc))
        if self.bias_init not in ("kmeans", "linear"):
            fail("bias_init", "must be kmeans or linear")
        for key in ("temperature_rate", "lr", "pretrain_lr", "lr_decay"):
            if not getattr(self, key) > 0:
                fail(key, "must be positive")
        for key in ("epochs", "batch_size", "calib_samples"):
            if getattr(self, key) < 1:
                fail(key, "must be at least 1")
        if self.pretrain_epochs < 0:
            fail("pretrain_epochs", "must be non-negative")
        if not 0 < self.val_fraction < 1:
            fail("val_fraction", "must lie strictly between 0 and 1")
        if len(self.phase_split) != 3 or min(self.phase_split) < 0 or sum(self.phase_split) <= 0:
            fail("phase_split", "needs three non-negative shares")
        if not 0 <= self.momentum < 1:
            fail("momentum", "must lie in [0, 1)")
        if self.weight_decay < 0:
            fail("weight_decay", "must be non-negative")
        if self.clip_norm is not None and not self.clip_norm > 0:
            fail("clip_norm", "must be positive or none")
        if self.max_scale_step is not None and not 0 < self.max_scale_step < 1:
            fail("max_scale_step", "must lie strictly between 0 and 1, or be none")
        return self

    def arch_for(self, n_classes: int) -> str:
        return self.arch.replace("{classes}", str(n_classes))

    def to_dict(self):
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d):
        kw = {}
        for f in fields(cls):
            if f.name in d:
                v = d[f.name]
                kw[f.name] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


_CONVERTERS = {
    "dataset_path": _optional(str),
    "dataset_format": str,
    "labels_path": _optional(str),
    "val_fraction": float,
    "synthetic_classes": int,
    "synthetic_samples": int,
    "synthetic_features": int,
    "arch": str,
    "weight_levels": str,
    "activation_levels": _optional(str),
    "bias_init": str,
    "shared_quantizers": _bool,
    "temperature_rate": float,
    "pretrain_epochs": int,
    "pretrain_lr": float,
    "pretrain_lr_decay_epochs": _ints,
    "epochs": int,
    "phase_split": _floats,
    "lr": float,
    "lr_decay_epochs": _ints,
    "lr_decay": float,
    "momentum": float,
    "weight_decay": float,
    "clip_norm": _optional(float),
    "max_scale_step": _optional(float),
    "batch_size": int,
    "calib_samples": int,
    "seed": int,
    "output_dir": str,
}


def parse_config(text: str) -> RunConfig:
    values, lines = {}, {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {raw.strip()!r}", lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _CONVERTERS:
            raise ConfigError(f"unknown key {key!r}", lineno, key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r} (first set on line {lines[key]})", lineno, key)
        try:
            values[key] = _CONVERTERS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{key}: invalid value {value!r} ({exc})", lineno, key) from None
        lines[key] = lineno
    return RunConfig(**values).validate(lines)


def load_config(path) -> RunConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())
