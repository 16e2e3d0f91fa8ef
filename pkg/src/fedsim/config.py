"""Run configuration: TOML file + CLI overrides, canonical serialization.

One seed drives every random choice through named sub-streams, so a config
file plus a seed pins the whole run. The canonical text form feeds a stable
fingerprint: two configs hash alike iff every semantically meaningful field
matches (the output directory is excluded, it only names where artifacts go).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, fields, replace

try:
    import tomllib
except ImportError:  # py3.10
    import tomli as tomllib

from .errors import ConfigError
from .losses import DistillConfig
from .model import ModelConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/out"
    # dataset: either a directory of class-named folders or a synthetic spec
    dataset_path: str | None = None
    synthetic: bool = False
    synth_classes: int = 7
    synth_per_class: int = 20
    train_fraction: float = 0.8
    val_fraction: float = 0.1
    test_fraction: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    flip_prob: float = 0.5
    rotation_degrees: float = 15.0
    clients: int = 4
    rounds: int = 30
    local_epochs: int = 1
    patience: int = 10
    lr: float = 2e-5
    weight_decay: float = 1e-5
    batch_size: int = 8
    sampler_enabled: bool = True
    teacher_embed_dim: int = 256
    teacher_depth: int = 6
    teacher_epochs: int = 5
    teacher_lr: float = 1e-3

    @property
    def fractions(self) -> tuple[float, float, float]:
        return (self.train_fraction, self.val_fraction, self.test_fraction)

    def validate(self) -> None:
        self.model.validate()
        if not self.synthetic and not self.dataset_path:
            raise ConfigError("config needs a dataset path or synthetic = true")
        if self.synthetic and self.synth_classes != self.model.num_classes:
            raise ConfigError(
                f"synthetic classes {self.synth_classes} != model num_classes "
                f"{self.model.num_classes}")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ConfigError(f"split fractions must sum to 1, got {self.fractions}")
        if min(self.fractions) < 0:
            raise ConfigError(f"split fractions must be nonnegative, got {self.fractions}")
        if self.synthetic and self.synth_per_class < 1:
            raise ConfigError("synth_per_class must be >= 1")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise ConfigError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.rotation_degrees < 0:
            raise ConfigError("rotation_degrees must be >= 0")
        for name in ("clients", "rounds", "local_epochs", "patience", "batch_size",
                     "teacher_embed_dim", "teacher_depth", "teacher_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.teacher_epochs < 0:
            raise ConfigError("teacher_epochs must be >= 0")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay nonnegative")
        if self.teacher_embed_dim % self.model.heads:
            raise ConfigError(
                f"teacher_embed_dim {self.teacher_embed_dim} not divisible by "
                f"{self.model.heads} heads")

    def canonical(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            if f.name == "output_dir":
                continue
            value = getattr(self, f.name)
            if f.name in ("model", "distill"):
                for sub in value.canonical().strip().split("\n"):
                    lines.append(f"{f.name}.{sub}")
            else:
                if isinstance(value, float):
                    value = repr(value)
                lines.append(f"{f.name}={value}")
        return "\n".join(sorted(lines)) + "\n"

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()


_SECTION_FIELDS = {
    "dataset": {"path": "dataset_path", "synthetic": "synthetic",
                "classes": "synth_classes", "per_class": "synth_per_class",
                "train_fraction": "train_fraction", "val_fraction": "val_fraction",
                "test_fraction": "test_fraction"},
    "augment": {"flip_prob": "flip_prob", "rotation_degrees": "rotation_degrees"},
    "federation": {"clients": "clients", "rounds": "rounds",
                   "local_epochs": "local_epochs", "patience": "patience"},
    "optimizer": {"lr": "lr", "weight_decay": "weight_decay",
                  "batch_size": "batch_size"},
    "sampler": {"enabled": "sampler_enabled"},
    "teacher": {"embed_dim": "teacher_embed_dim", "depth": "teacher_depth",
                "epochs": "teacher_epochs", "lr": "teacher_lr"},
}
_TOP_FIELDS = {"seed": "seed", "output_dir": "output_dir"}
_MODEL_FIELDS = {f.name for f in fields(ModelConfig)}
_DISTILL_FIELDS = {f.name for f in fields(DistillConfig)}


def config_from_dict(raw: dict) -> RunConfig:
    """Build a RunConfig from parsed TOML, rejecting unknown keys by name."""
    kwargs: dict = {}
    for key, value in raw.items():
        if key in _TOP_FIELDS:
            kwargs[_TOP_FIELDS[key]] = value
        elif key == "model":
            unknown = set(value) - _MODEL_FIELDS
            if unknown:
                raise ConfigError(f"[model] unknown key '{sorted(unknown)[0]}'")
            kwargs["model"] = ModelConfig(**value)
        elif key == "distill":
            unknown = set(value) - _DISTILL_FIELDS
            if unknown:
                raise ConfigError(f"[distill] unknown key '{sorted(unknown)[0]}'")
            kwargs["distill"] = DistillConfig(**value)
        elif key in _SECTION_FIELDS:
            mapping = _SECTION_FIELDS[key]
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a table")
            for sub, subval in value.items():
                if sub not in mapping:
                    raise ConfigError(f"[{key}] unknown key '{sub}'")
                kwargs[mapping[sub]] = subval
        else:
            raise ConfigError(f"unknown config key '{key}'")
    try:
        return RunConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad config value: {exc}") from exc


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """Parse a TOML file (optional) and apply flag overrides on top."""
    raw: dict = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config '{path}': {exc}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"invalid TOML in '{path}': {exc}") from exc
    cfg = config_from_dict(raw)
    if overrides:
        model_over = {k: v for k, v in overrides.items() if k in _MODEL_FIELDS}
        plain = {k: v for k, v in overrides.items() if k not in _MODEL_FIELDS}
        if model_over:
            plain["model"] = replace(cfg.model, **model_over)
        bad = [k for k in plain if k != "model" and k not in {f.name for f in fields(RunConfig)}]
        if bad:
            raise ConfigError(f"unknown config override '{bad[0]}'")
        cfg = replace(cfg, **plain)
    cfg.validate()
    return cfg
