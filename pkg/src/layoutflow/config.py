"""Project configuration: one object holding paths, the model shape and the
per-stage defaults, loadable from a UTF-8 key=value file.

Dotted keys address sections ("train.steps=500", "edit.max_iters=10");
bare keys address top-level fields ("seed=7"). Values are coerced to the
type of the field they replace.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .denoiser import UNetConfig
from .diffusion import TrainConfig
from .inversion import FinetuneConfig, InversionConfig
from .layout import EditConfig


class ConfigError(ValueError):
    pass


@dataclass
class ProjectConfig:
    seed: int = 0
    out_dir: str = "runs"
    checkpoint: str = "runs/base.lfck"
    dataset_dir: str = "runs/dataset"
    bank_dir: str = "runs/bank"
    train: TrainConfig = field(default_factory=TrainConfig)
    invert: InversionConfig = field(default_factory=InversionConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    edit: EditConfig = field(default_factory=EditConfig)
    model: UNetConfig = field(default_factory=UNetConfig)


def _coerce(current, raw: str):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        parts = [p for p in raw.split(",") if p.strip()]
        elem = current[0] if current else 0.0
        return tuple(_coerce(elem, p) for p in parts)
    if current is None:
        if raw.lower() in ("none", ""):
            return None
        try:
            return int(raw)
        except ValueError:
            try:
                return float(raw)
            except ValueError:
                return raw
    return raw


def apply_setting(cfg: ProjectConfig, key: str, value: str) -> None:
    """Set one dotted key on the config, validating section and field names."""
    parts = key.strip().split(".")
    target = cfg
    if len(parts) == 2:
        section, attr = parts
        if not hasattr(cfg, section):
            raise ConfigError(f"unknown config section {section!r}")
        target = getattr(cfg, section)
        if not hasattr(target, attr):
            raise ConfigError(f"unknown key {attr!r} in section {section!r}")
    elif len(parts) == 1:
        attr = parts[0]
        if not hasattr(cfg, attr) or attr in ("train", "invert", "finetune", "edit", "model"):
            raise ConfigError(f"unknown config key {key!r}")
    else:
        raise ConfigError(f"keys have at most one dot, got {key!r}")

    current = getattr(target, attr)
    coerced = _coerce(current, value)
    if isinstance(target, UNetConfig):
        # frozen dataclass: rebuild the section
        cfg.model = replace(target, **{attr: coerced})
    else:
        # invariants are checked once after all settings land (validate_config),
        # so coupled fields like iterative_times/thresholds can change length
        setattr(target, attr, coerced)


def validate_config(cfg: ProjectConfig) -> ProjectConfig:
    """Re-run every section's invariant checks; raises ConfigError."""
    for name in ("train", "invert", "finetune", "edit"):
        section = getattr(cfg, name)
        post = getattr(type(section), "__post_init__", None)
        if post is None:
            continue
        try:
            post(section)
        except ValueError as e:
            raise ConfigError(f"section {name!r}: {e}") from e
    return cfg


def load_config(path: str | Path, overrides: list[str] | None = None) -> ProjectConfig:
    cfg = ProjectConfig()
    text = Path(path).read_text(encoding="utf-8")
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        try:
            apply_setting(cfg, key, value)
        except (ConfigError, ValueError) as e:
            raise ConfigError(f"{path}:{lineno}: {e}") from e
    for item in overrides or []:
        key, _, value = item.partition("=")
        apply_setting(cfg, key, value)
    return validate_config(cfg)


def default_config(overrides: list[str] | None = None) -> ProjectConfig:
    cfg = ProjectConfig()
    for item in overrides or []:
        key, _, value = item.partition("=")
        apply_setting(cfg, key, value)
    return validate_config(cfg)
