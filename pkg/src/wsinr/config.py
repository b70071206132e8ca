"""Run configuration: presets, flat dotted-key overrides, JSON round-trip, hashing."""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Mapping

from .encoding import DESK_HASH_GRID, PAPER_HASH_GRID, HashGridConfig
from .errors import ConfigError
from .model import ModelConfig

STAGE_ORDER = ("reconstruction", "segmentation")
ENCODER_KINDS = ("hash", "nerf-pe", "none")
RUN_ROOT_ENV = "WSINR_RUN_ROOT"


@dataclass(frozen=True)
class DataConfig:
    base_size: int = 512
    window: int = 64
    order: str = "sequential"
    tissue_threshold: float | None = None
    n_train: int = 4
    n_test: int = 8
    train_seed_offset: int = 0
    test_seed_offset: int = 1000


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    stage1_epochs: int = 100
    lr: float = 1e-5
    encoder_lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    stage_order: tuple[str, ...] = STAGE_ORDER
    dice_squared: bool = False
    schedule: str = "round-robin"

    def __post_init__(self):
        if not 0 < self.stage1_epochs < self.epochs:
            raise ConfigError(f"stage-1 epochs {self.stage1_epochs} must lie in (0, {self.epochs})")
        if self.lr <= 0 or self.encoder_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if tuple(self.stage_order) != STAGE_ORDER:
            raise ConfigError(
                f"stage order {tuple(self.stage_order)} rejected: reconstruction must be trained "
                "before segmentation, never jointly or reversed"
            )

    @property
    def stage2_epochs(self) -> int:
        return self.epochs - self.stage1_epochs


@dataclass(frozen=True)
class ItoConfig:
    max_epochs: int = 20
    mse_threshold: float = 0.002
    warmup_epochs: int = 5
    divergence_ratio: float = 1.30
    ema_decay: float = 0.99
    ema_warmup: bool = True
    lr: float = 1e-5
    level: str = "base"

    def __post_init__(self):
        if not self.warmup_epochs < self.max_epochs:
            raise ConfigError("ITO warm-up must be shorter than the epoch cap")
        if self.divergence_ratio <= 1.0:
            raise ConfigError("divergence ratio must exceed 1")


@dataclass(frozen=True)
class ExperimentConfig:
    encoder: str = "hash"
    n_freqs: int = 10
    decouple_split: int | None = None
    spectrum_patch: int = 64

    def __post_init__(self):
        if self.encoder not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.encoder!r}")


@dataclass(frozen=True)
class RunConfig:
    preset: str = "desk-scale"
    seed: int = 0
    encoding: HashGridConfig = DESK_HASH_GRID
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    ito: ItoConfig = ItoConfig()
    experiment: ExperimentConfig = ExperimentConfig()
    manifest: str = ""
    run_dir: str = ""

    def encoder_width(self) -> int:
        kind = self.experiment.encoder
        if kind == "hash":
            return self.encoding.width
        if kind == "nerf-pe":
            return 4 * self.experiment.n_freqs
        return 2

    def model_config(self) -> ModelConfig:
        return replace(self.model, in_width=self.encoder_width())


# Model widths are far below the full-size network; see README for timings.
_DESK_MODEL = ModelConfig(conv_width=16, point_width=16, hidden=32, head_width=16)

PRESETS: dict[str, RunConfig] = {
    "paper-scale": RunConfig(
        preset="paper-scale",
        encoding=PAPER_HASH_GRID,
        model=ModelConfig(),
        data=DataConfig(base_size=8192, window=1024, n_train=39, n_test=22),
        train=TrainConfig(epochs=200, stage1_epochs=100, lr=1e-5, encoder_lr=1e-5),
        ito=ItoConfig(lr=1e-5),
    ),
    "desk-scale": RunConfig(
        preset="desk-scale",
        model=_DESK_MODEL,
        data=DataConfig(base_size=512, window=64, n_train=4, n_test=8),
        train=TrainConfig(epochs=40, stage1_epochs=20, lr=2e-3, encoder_lr=2e-2),
        ito=ItoConfig(lr=2e-2),
    ),
    "smoke": RunConfig(
        preset="smoke",
        encoding=HashGridConfig(levels=8, base_resolution=4, scale=1.5, table_size=2**10, features=2),
        model=ModelConfig(conv_width=8, conv_layers=2, point_width=8, point_layers=2, hidden=16, head_width=8),
        data=DataConfig(base_size=128, window=32, n_train=2, n_test=2),
        train=TrainConfig(epochs=4, stage1_epochs=2, lr=2e-3, encoder_lr=2e-2),
        ito=ItoConfig(max_epochs=6, warmup_epochs=2, lr=2e-2),
    ),
}


def _flatten(obj: Any, prefix: str = "") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for f in fields(obj):
        v = getattr(obj, f.name)
        key = f"{prefix}{f.name}"
        if is_dataclass(v):
            out.update(_flatten(v, key + "."))
        elif isinstance(v, tuple):
            out[key] = list(v)
        else:
            out[key] = v
    return out


def flatten(cfg: RunConfig) -> dict[str, Any]:
    return _flatten(cfg)


def _coerce(raw: Any, current: Any, key: str) -> Any:
    if isinstance(raw, str) and not isinstance(current, str):
        try:
            raw = json.loads(raw)
        except ValueError:
            if current is not None:
                raise ConfigError(f"cannot parse value {raw!r} for {key}") from None
    if isinstance(current, bool):
        if not isinstance(raw, bool):
            raise ConfigError(f"{key} expects true/false, got {raw!r}")
        return raw
    if isinstance(current, int) and not isinstance(current, bool):
        if isinstance(raw, float) and raw.is_integer():
            raw = int(raw)
        if not isinstance(raw, int) or isinstance(raw, bool):
            raise ConfigError(f"{key} expects an integer, got {raw!r}")
        return raw
    if isinstance(current, float):
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{key} expects a number, got {raw!r}")
        return float(raw)
    if isinstance(current, tuple):
        if not isinstance(raw, (list, tuple)):
            raise ConfigError(f"{key} expects a list, got {raw!r}")
        return tuple(raw)
    return raw


def _apply(obj: Any, path: list[str], raw: Any, key: str) -> Any:
    names = {f.name for f in fields(obj)}
    head = path[0]
    if head not in names:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, head)
    if len(path) == 1:
        if is_dataclass(current):
            raise ConfigError(f"{key!r} is a section, not a value")
        return replace(obj, **{head: _coerce(raw, current, key)})
    if not is_dataclass(current):
        raise ConfigError(f"unknown config key {key!r}")
    return replace(obj, **{head: _apply(current, path[1:], raw, key)})


def resolve(preset: str = "desk-scale", overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """Preset plus dotted-key overrides; every value materialized."""
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = PRESETS[preset]
    for key, raw in (overrides or {}).items():
        if key == "preset":
            continue
        cfg = _apply(cfg, key.split("."), raw, key)
    return cfg


def parse_overrides(pairs) -> dict[str, str]:
    out = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(f"override {pair!r} is not key=value")
        k, v = pair.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def load_config(path: str | Path, extra: Mapping[str, Any] | None = None) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} not found")
    try:
        raw = json.loads(path.read_text())
    except ValueError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    merged = {**raw, **(extra or {})}
    return resolve(merged.get("preset", "desk-scale"), merged)


def to_json(cfg: RunConfig) -> str:
    return json.dumps(flatten(cfg), indent=2, sort_keys=True) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that affects numbers (paths excluded)."""
    flat = {k: v for k, v in flatten(cfg).items() if k not in ("run_dir", "manifest")}
    return hashlib.sha256(json.dumps(flat, sort_keys=True).encode()).hexdigest()[:16]


def diff(a: RunConfig, b: RunConfig) -> dict[str, tuple[Any, Any]]:
    fa, fb = flatten(a), flatten(b)
    return {k: (fa[k], fb[k]) for k in fa if fa[k] != fb[k]}


def default_run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def as_dict(cfg: RunConfig) -> dict:
    return asdict(cfg)
