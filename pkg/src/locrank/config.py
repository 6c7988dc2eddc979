"""Run configuration: a flat ``key = value`` text format with typed validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .errors import ConfigurationError

__all__ = ["RunConfig", "parse_config_text", "load_config"]


@dataclass
class RunConfig:
    """Every training, evaluation and data-generation knob.

    Defaults target the 64x64 synthetic benchmark. Learning rates, momentum,
    batch size and the scale multiplier follow the published recipe
    (RN 1e-3, STN 1e-4, momentum 0.9, 25 pairs per batch, scale at 1/10).
    """

    # optimisation
    epochs: int = 50
    batch_size: int = 25
    lr_rn: float = 0.001
    lr_stn: float = 0.0001
    scale_lr_factor: float = 0.1
    momentum: float = 0.9
    st_loss_weight: float = 1.0
    stage: int = 1
    stage2_keep_ranker: bool = True
    # model
    channels: int = 1
    image_size: int = 64
    crop_size: int = 56
    patch_size: int = 32
    s_init: float = 0.5
    t_init_range: float = 0.3
    # evaluation
    tta_flip: bool = True
    eq_tau_factor: float = 0.1
    # bookkeeping
    seed: int = 0
    checkpoint_every: int = 10
    init_checkpoint: str = ""
    out_dir: str = "run"
    train_manifest: str = ""
    test_manifest: str = ""
    threads: int = 1
    deterministic: bool = True
    # synthetic data generation
    data_dir: str = "data"
    n_train_images: int = 400
    n_train_pairs: int = 800
    n_test_images: int = 200
    n_test_pairs: int = 200
    pair_eps: float = 0.1
    clutter_level: float = 0.5
    position_mode: str = "fixed-region"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = ["epochs", "batch_size", "channels", "image_size", "crop_size", "patch_size",
                    "checkpoint_every", "threads", "n_train_images", "n_test_images"]
        for name in positive:
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"config key '{name}' must be positive, got {getattr(self, name)}")
        for name in ["lr_rn", "lr_stn", "scale_lr_factor", "st_loss_weight", "t_init_range",
                     "eq_tau_factor", "pair_eps", "clutter_level"]:
            if getattr(self, name) < 0:
                raise ConfigurationError(f"config key '{name}' must be non-negative, got {getattr(self, name)}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"config key 'momentum' must lie in [0, 1), got {self.momentum}")
        if self.s_init <= 0:
            raise ConfigurationError(f"config key 's_init' must be positive, got {self.s_init}")
        if self.stage not in (1, 2):
            raise ConfigurationError(f"config key 'stage' must be 1 or 2, got {self.stage}")
        if self.crop_size > self.image_size:
            raise ConfigurationError(
                f"config key 'crop_size' ({self.crop_size}) exceeds 'image_size' ({self.image_size})"
            )
        if self.patch_size < 2:
            raise ConfigurationError("config key 'patch_size' must be >= 2")
        if self.position_mode not in ("fixed-region", "uniform"):
            raise ConfigurationError(
                f"config key 'position_mode' must be 'fixed-region' or 'uniform', got {self.position_mode!r}"
            )

    # -- (de)serialisation ------------------------------------------------

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, bool):
                value = "true" if value else "false"
            elif isinstance(value, float):
                value = repr(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, overrides: dict[str, str]) -> "RunConfig":
        """Apply string-valued overrides, coercing each to the field's type."""
        changes = {key: _coerce(key, raw) for key, raw in overrides.items()}
        return self.replace(**changes)

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "RunConfig":
        return cls().with_overrides(parse_config_text(text, source))


_FIELD_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw):
    if key not in _FIELD_TYPES:
        raise ConfigurationError(f"unknown config key '{key}'")
    kind = _FIELD_TYPES[key]
    if not isinstance(raw, str):
        return raw
    raw = raw.strip()
    try:
        if kind == "bool":
            lowered = raw.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigurationError(f"config key '{key}' expects {kind}, got {raw!r}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment line."""
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigurationError(f"{source}:{lineno}: expected 'key = value', got {stripped!r}")
        key, value = (part.strip() for part in stripped.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigurationError(f"{source}:{lineno}: unknown config key '{key}'")
        values[key] = value
    return values


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc.strerror}") from None
    return RunConfig.from_text(text, str(path))
