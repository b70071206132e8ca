"""Evaluation protocols: cross-resolution Dice, encoder ablation, hash-level decoupling."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, replace
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from ..config import ENCODER_KINDS, RunConfig, diff
from ..data import LEVEL_TAGS, ImagePyramid, SlidePyramid, SyntheticSpec, generate_synthetic, level_index, read_manifest
from ..encoding import HashGridEncoder
from ..errors import ConfigError, DomainError, InvariantViolation
from ..model import WsiInr
from ..objectives import dice_metric, psnr
from ..pipeline import DenseOutput, ItoResult, TrainState, infer_dense, make_encoder, run_ito, train
from .spectrum import SpectrumReport, fft2_magnitude

log = logging.getLogger(__name__)

MODES = ("base-resolution-opt", "resolution-specific-opt")


def load_slides(cfg: RunConfig, split: str) -> list[SlidePyramid]:
    """Slides for ``split`` from the manifest, or generated from the configured seeds."""
    if split not in ("train", "test"):
        raise ConfigError(f"unknown split {split!r}")
    if cfg.manifest:
        return read_manifest(cfg.manifest, split)
    d = cfg.data
    n, offset = (d.n_train, d.train_seed_offset) if split == "train" else (d.n_test, d.test_seed_offset)
    return [
        generate_synthetic(SyntheticSpec(seed=offset + i, height=d.base_size, width=d.base_size))
        for i in range(n)
    ]


def pct_change(value: float, base: float) -> Decimal:
    """Relative change in percent, rounded half-up to two decimals."""
    if base == 0:
        raise ZeroDivisionError("percent change against a zero baseline")
    # go through repr so printed inputs like 0.2417 are taken at face value
    v, b = Decimal(repr(float(value))), Decimal(repr(float(base)))
    return ((v - b) / b * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def format_pct(value: float, base: float) -> str:
    d = pct_change(value, base)
    if d == 0:
        d = abs(d)
    return f"{'+' if d >= 0 else ''}{d}%"


# -- cross-resolution ---------------------------------------------------------------


@dataclass
class CrossResRow:
    mode: str
    slide: str
    level: str
    dice: float
    pct_change: str


@dataclass
class SlideRun:
    """Everything produced for one (mode, slide, level) cell."""

    mode: str
    slide: str
    level: str
    ito: ItoResult
    output: DenseOutput


ItoHook = Callable[[SlideRun], None]


def _ito(cfg: RunConfig, model: WsiInr, images: ImagePyramid, level: str) -> ItoResult:
    enc = make_encoder(cfg, images.slide_id)
    return run_ito(images, level, model, enc, replace(cfg.ito, level=level), cfg.data.window)


def eval_cross_resolution(
    cfg: RunConfig,
    model: WsiInr,
    slides: Sequence[SlidePyramid],
    modes: Sequence[str] = MODES,
    levels: Sequence[str] = LEVEL_TAGS,
    on_cell: ItoHook | None = None,
) -> list[CrossResRow]:
    """Dice per mode, slide and level on unseen slides.

    Base-resolution opt fits one encoder at ``base`` and queries every level
    with it. Resolution-specific opt fits a fresh encoder at each level. The
    ``base`` fit is identical in both modes (same init and data), so it is run
    once and shared.
    """
    for m in modes:
        if m not in MODES:
            raise ConfigError(f"unknown protocol {m!r}; expected one of {MODES}")
    rows: list[CrossResRow] = []
    for slide in slides:
        if len(slide.masks) < len(levels) or len(slide.images) < len(levels):
            raise DomainError(f"slide {slide.slide_id} lacks pyramid levels for {list(levels)}")
        images = slide.images_only()
        base_fit = _ito(cfg, model, images, "base")
        for mode in modes:
            dice: dict[str, float] = {}
            for tag in levels:
                fit = base_fit if (tag == "base" or mode == "base-resolution-opt") else _ito(cfg, model, images, tag)
                out = infer_dense(images, tag, model, fit.encoder, cfg.data.window)
                # the only place a test mask is read
                dice[tag] = dice_metric(out.mask, slide.mask(tag), tag).dice
                if on_cell:
                    on_cell(SlideRun(mode, slide.slide_id, tag, fit, out))
            for tag in levels:
                pct = "" if tag == "base" or dice["base"] == 0 else format_pct(dice[tag], dice["base"])
                rows.append(CrossResRow(mode, slide.slide_id, tag, dice[tag], pct))
    return rows


def summarize_cross_resolution(rows: Sequence[CrossResRow]) -> dict[tuple[str, str], float]:
    """Mean Dice per (mode, level)."""
    acc: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        acc.setdefault((r.mode, r.level), []).append(r.dice)
    return {k: float(np.mean(v)) for k, v in acc.items()}


def write_table1(path: str | Path, rows: Sequence[CrossResRow]) -> None:
    """Per-slide rows followed by one ``mean`` row per mode and level."""
    means = summarize_cross_resolution(rows)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mode", "slide", "level", "dice", "pct_change"])
        for r in rows:
            w.writerow([r.mode, r.slide, r.level, f"{r.dice:.6f}", r.pct_change])
        for mode in dict.fromkeys(r.mode for r in rows):
            base = means.get((mode, "base"))
            for tag in LEVEL_TAGS:
                if (mode, tag) not in means:
                    continue
                d = means[(mode, tag)]
                pct = "" if tag == "base" or not base else format_pct(d, base)
                w.writerow([mode, "mean", tag, f"{d:.6f}", pct])


# -- ablation -----------------------------------------------------------------------


@dataclass
class AblationRow:
    arm: str
    level: str
    dice: float


def arm_config(cfg: RunConfig, arm: str) -> RunConfig:
    if arm not in ENCODER_KINDS:
        raise ConfigError(f"unknown ablation arm {arm!r}")
    out = replace(cfg, experiment=replace(cfg.experiment, encoder=arm))
    changed = set(diff(cfg, out)) - {"experiment.encoder"}
    if changed:
        raise InvariantViolation(f"ablation arms differ beyond the encoder: {sorted(changed)}")
    return out


def run_ablation(
    cfg: RunConfig,
    arms: Sequence[str],
    train_slides: Sequence[SlidePyramid],
    test_slides: Sequence[SlidePyramid],
    levels: Sequence[str] = LEVEL_TAGS,
    on_trained: Callable[[str, TrainState], None] | None = None,
) -> list[AblationRow]:
    """Train every arm from the same seed and config, then score base-fit encoders on unseen slides."""
    rows = []
    for arm in arms:
        acfg = arm_config(cfg, arm)
        state = train(train_slides, TrainState.create(acfg, [s.slide_id for s in train_slides]))
        if on_trained:
            on_trained(arm, state)
        per_level: dict[str, list[float]] = {t: [] for t in levels}
        for slide in test_slides:
            images = slide.images_only()
            fit = _ito(acfg, state.model, images, "base")
            for tag in levels:
                out = infer_dense(images, tag, state.model, fit.encoder, acfg.data.window)
                per_level[tag].append(dice_metric(out.mask, slide.mask(tag), tag).dice)
        for tag in levels:
            rows.append(AblationRow(arm, tag, float(np.mean(per_level[tag]))))
        log.info("ablation arm %s: %s", arm, {t: round(np.mean(v), 4) for t, v in per_level.items()})
    return rows


def write_table2(path: str | Path, rows: Sequence[AblationRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["arm", "level", "dice"])
        for r in rows:
            w.writerow([r.arm, r.level, f"{r.dice:.6f}"])


# -- hash-level decoupling ----------------------------------------------------------

VARIANTS = ("full", "low-only", "high-only")


@dataclass
class DecoupleResult:
    variant: str
    reconstruction: np.ndarray
    mask: np.ndarray
    psnr: float
    spectrum: SpectrumReport


def default_split(encoder: HashGridEncoder) -> int:
    """Direct levels count as low, hashed levels as high."""
    return sum(m == "direct" for m in encoder.level_modes)


def center_patch_origin(shape: tuple[int, int], size: int) -> tuple[int, int]:
    h, w = shape
    if size > min(h, w):
        raise DomainError(f"spectrum patch {size} larger than level {shape}")
    return (h - size) // 2, (w - size) // 2


def decouple_hash_levels(
    images: ImagePyramid,
    level: str,
    model: WsiInr,
    encoder: HashGridEncoder,
    window: int,
    split: int | None = None,
    patch: int = 64,
) -> dict[str, DecoupleResult]:
    """Infer with low levels only, high levels only and the full grid; spectra on a central patch."""
    if not isinstance(encoder, HashGridEncoder):
        raise ConfigError("level decoupling needs a hash-grid encoder")
    L = encoder.config.levels
    split = default_split(encoder) if split is None else split
    if not 1 <= split <= L - 1:
        raise DomainError(f"split {split} outside [1, {L - 1}]")
    if isinstance(images, SlidePyramid):
        images = images.images_only()
    target = images.images[level_index(level)]
    origin = center_patch_origin(target.shape[:2], patch)
    keep = {"full": lambda l: True, "low-only": lambda l: l < split, "high-only": lambda l: l >= split}
    out = {}
    for name in VARIANTS:
        dense = infer_dense(images, level, model, encoder.mask_levels(keep[name]), window)
        r0, c0 = origin
        crop = dense.reconstruction[r0 : r0 + patch, c0 : c0 + patch]
        out[name] = DecoupleResult(name, dense.reconstruction, dense.mask, psnr(dense.reconstruction, target), fft2_magnitude(crop, origin))
    return out
