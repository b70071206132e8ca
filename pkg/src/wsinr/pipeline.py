"""Two-stage training over many slides and per-slide inference-time optimization."""

from __future__ import annotations

import logging
import zlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import numerics as nx
from .config import ItoConfig, RunConfig
from .data import (
    LEVEL_TAGS,
    ImagePyramid,
    SlidePyramid,
    WindowSampler,
    level_index,
    make_window,
    owned_region,
    sample_windows,
    window_grid,
)
from .encoding import Encoder, FixedEncoder, HashGridEncoder
from .errors import ConfigError, InvariantViolation, NumericalError
from .model import GROUPS, WindowBatch, WsiInr, params_digest
from .numerics import AdamState, EmaState, Tape, Tensor, adam_step, ema_swap, ema_update, no_tape
from .objectives import LossValue, bce_loss, dice_loss, dice_metric, mse_loss, psnr

log = logging.getLogger(__name__)

STOP_REASONS = ("threshold", "divergence", "max-epochs", "none")


@dataclass(frozen=True)
class FreezePlan:
    """Which parameter groups may move. ``encoders`` covers every slide encoder."""

    trainable: frozenset[str]

    def model_groups(self) -> list[str]:
        return [g for g in GROUPS if g in self.trainable]

    @property
    def encoders(self) -> bool:
        return "encoders" in self.trainable


STAGE1_PLAN = FreezePlan(frozenset({"encoders", "decoder", "rec_head"}))
STAGE2_PLAN = FreezePlan(frozenset({"seg_head"}))
ITO_PLAN = FreezePlan(frozenset({"encoders"}))


def make_encoder(cfg: RunConfig, slide_id: str) -> Encoder:
    """Fresh encoder for a slide; the init stream depends only on seed and slide id."""
    kind = cfg.experiment.encoder
    if kind == "hash":
        rng = np.random.default_rng([cfg.seed, 7, zlib.crc32(slide_id.encode())])
        return HashGridEncoder.create(cfg.encoding, rng, slide_id)
    return FixedEncoder(kind, cfg.experiment.n_freqs, slide_id)


@dataclass
class TrainState:
    config: RunConfig
    model: WsiInr
    encoders: dict[str, Encoder]
    net_adam: AdamState
    enc_adam: dict[str, AdamState]
    completed: list[str] = field(default_factory=list)
    epochs_done: int = 0
    history: list[dict] = field(default_factory=list)

    @classmethod
    def create(cls, cfg: RunConfig, slide_ids: Sequence[str]) -> "TrainState":
        model = WsiInr(cfg.model_config(), np.random.default_rng([cfg.seed, 1]))
        t = cfg.train
        encoders = {sid: make_encoder(cfg, sid) for sid in slide_ids}
        return cls(
            cfg,
            model,
            encoders,
            AdamState(t.lr, t.beta1, t.beta2, t.eps),
            {sid: AdamState(t.encoder_lr, t.beta1, t.beta2, t.eps) for sid in slide_ids},
        )

    def global_digest(self) -> str:
        return params_digest(self.model.params)

    def group_digests(self) -> dict[str, str]:
        out = {g: params_digest(self.model.group(g)) for g in GROUPS}
        out["encoders"] = params_digest(
            {f"{sid}/{k}": t for sid, enc in self.encoders.items() for k, t in enc.params().items()}
        )
        return out


def _apply_plan(state: TrainState, plan: FreezePlan) -> None:
    state.model.set_trainable(plan.model_groups())
    for enc in state.encoders.values():
        enc.set_trainable(plan.encoders)


def _trainable_grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: t.grad for k, t in params.items() if t.requires_grad and t.grad is not None}


def _clear_grads(params: Iterable[Tensor]) -> None:
    for t in params:
        t.grad = None


def _round_robin(slides: Sequence[ImagePyramid], level: int, cfg: RunConfig, epoch: int) -> list[WindowBatch]:
    streams = []
    for i, s in enumerate(slides):
        sampler = WindowSampler(cfg.data.window, cfg.data.order, cfg.seed * 1000 + i, cfg.data.tissue_threshold)
        streams.append(list(sample_windows(s, level, sampler, epoch)))
    out = []
    for k in range(max((len(s) for s in streams), default=0)):
        out.extend(s[k] for s in streams if k < len(s))
    return out


def _check_frozen(before: dict[str, str], after: dict[str, str], plan: FreezePlan, where: str) -> None:
    for g, d in before.items():
        if g not in plan.trainable and after[g] != d:
            raise InvariantViolation(f"{where}: frozen group {g!r} changed")


def _numerical_abort(exc: NumericalError, win: WindowBatch, stage: str, dump_dir) -> NumericalError:
    msg = f"{stage}: non-finite values on slide {win.slide_id} window at {win.origin} size {win.size}: {exc}"
    if dump_dir is not None:
        from pathlib import Path

        path = Path(dump_dir) / f"nan_{stage}_{win.slide_id}_{win.origin[0]}_{win.origin[1]}.npz"
        path.parent.mkdir(parents=True, exist_ok=True)
        np.savez(path, coords=win.coords, image=win.image if win.image is not None else np.zeros(0))
        msg += f" (window dumped to {path})"
    return NumericalError(msg)


EpochHook = Callable[[TrainState, str, int], None]


def train_stage1(
    slides: Sequence[SlidePyramid],
    state: TrainState,
    on_epoch: EpochHook | None = None,
    dump_dir=None,
) -> TrainState:
    """Reconstruction-only training of encoders, decoder and reconstruction head."""
    cfg = state.config
    if "reconstruction" in state.completed:
        return state
    _apply_plan(state, STAGE1_PLAN)
    model = state.model
    net_params = {k: t for k, t in model.params.items() if t.requires_grad}
    slides_by_id = {s.slide_id: s for s in slides}
    missing = set(slides_by_id) - set(state.encoders)
    if missing:
        raise ConfigError(f"no encoder for training slides {sorted(missing)}")
    for epoch in range(state.epochs_done, cfg.train.stage1_epochs):
        before = state.group_digests()
        per_slide: dict[str, list[float]] = {sid: [] for sid in slides_by_id}
        for win in _round_robin(slides, 0, cfg, epoch):
            enc = state.encoders[win.slide_id]
            try:
                with Tape() as tape:
                    rec = model.rec_head(model.decode(model.features(enc, win)))
                    loss = mse_loss(rec, win.image)
                tape.backward(loss.total)
            except NumericalError as exc:
                raise _numerical_abort(exc, win, "stage1", dump_dir) from exc
            adam_step(net_params, _trainable_grads(net_params), state.net_adam)
            enc_params = enc.params()
            adam_step(enc_params, _trainable_grads(enc_params), state.enc_adam[win.slide_id])
            _clear_grads(model.params.values())
            _clear_grads(enc_params.values())
            per_slide[win.slide_id].append(loss.value)
        _check_frozen(before, state.group_digests(), STAGE1_PLAN, f"stage 1 epoch {epoch + 1}")
        for sid, losses in per_slide.items():
            state.history.append({"stage": "reconstruction", "epoch": epoch + 1, "slide": sid, "loss": float(np.mean(losses))})
        state.epochs_done = epoch + 1
        log.info("stage 1 epoch %d: mean mse %.5f", epoch + 1, np.mean([np.mean(v) for v in per_slide.values()]))
        if on_epoch:
            on_epoch(state, "reconstruction", epoch + 1)
    state.completed.append("reconstruction")
    return state


def seg_loss(seg: Tensor, mask: np.ndarray, squared: bool = False) -> LossValue:
    H, W = mask.shape
    lesion = nx.reshape(nx.slice_(seg, 2, 1, 2), (H, W))
    return bce_loss(seg, mask) + dice_loss(lesion, mask, squared)


def train_stage2(
    slides: Sequence[SlidePyramid],
    state: TrainState,
    on_epoch: EpochHook | None = None,
    dump_dir=None,
) -> TrainState:
    """Segmentation-head training on frozen features (BCE + soft Dice)."""
    cfg = state.config
    if "reconstruction" not in state.completed:
        raise ConfigError("segmentation stage requires a completed reconstruction stage")
    if "segmentation" in state.completed:
        return state
    _apply_plan(state, STAGE2_PLAN)
    model = state.model
    head = {k: t for k, t in model.params.items() if t.requires_grad}
    # everything upstream of the head is frozen, so features are computed once
    cache: dict[tuple[str, tuple[int, int]], np.ndarray] = {}
    with no_tape():
        for s in slides:
            for win in sample_windows(s, 0, WindowSampler(cfg.data.window)):
                cache[(s.slide_id, win.origin)] = model.decode(model.features(state.encoders[s.slide_id], win)).data
    start = max(state.epochs_done, cfg.train.stage1_epochs)
    for epoch in range(start, cfg.train.epochs):
        before = state.group_digests()
        per_slide: dict[str, list[float]] = {s.slide_id: [] for s in slides}
        for win in _round_robin(slides, 0, cfg, epoch):
            h = Tensor(cache[(win.slide_id, win.origin)])
            try:
                with Tape() as tape:
                    loss = seg_loss(model.seg_head(h), win.mask, cfg.train.dice_squared)
                tape.backward(loss.total)
            except NumericalError as exc:
                raise _numerical_abort(exc, win, "stage2", dump_dir) from exc
            adam_step(head, _trainable_grads(head), state.net_adam)
            _clear_grads(model.params.values())
            per_slide[win.slide_id].append(loss.value)
        _check_frozen(before, state.group_digests(), STAGE2_PLAN, f"stage 2 epoch {epoch + 1}")
        for sid, losses in per_slide.items():
            state.history.append({"stage": "segmentation", "epoch": epoch + 1, "slide": sid, "loss": float(np.mean(losses))})
        state.epochs_done = epoch + 1
        log.info("stage 2 epoch %d: mean loss %.5f", epoch + 1, np.mean([np.mean(v) for v in per_slide.values()]))
        if on_epoch:
            on_epoch(state, "segmentation", epoch + 1)
    state.completed.append("segmentation")
    return state


def train(slides: Sequence[SlidePyramid], state: TrainState, on_epoch: EpochHook | None = None, dump_dir=None) -> TrainState:
    order = tuple(state.config.train.stage_order)
    if order != ("reconstruction", "segmentation"):
        raise ConfigError(f"stage order {order} is not supported")
    train_stage1(slides, state, on_epoch, dump_dir)
    return train_stage2(slides, state, on_epoch, dump_dir)


# -- inference-time optimization -------------------------------------------------


@dataclass
class StopDecision:
    stop: bool
    reason: str
    epoch: int
    mse: float
    min_mse: float


def check_stop(history: Sequence[float], cfg: ItoConfig) -> StopDecision:
    """Dual-criterion early stopping on per-epoch MSE.

    Precedence within one epoch: threshold, then divergence (only after the
    warm-up), then the epoch cap.
    """
    if not history:
        raise ValueError("check_stop needs at least one epoch of history")
    epoch = len(history)
    cur = float(history[-1])
    best = float(min(history))
    if cur < cfg.mse_threshold:
        return StopDecision(True, "threshold", epoch, cur, best)
    if epoch > cfg.warmup_epochs and cur > cfg.divergence_ratio * best:
        return StopDecision(True, "divergence", epoch, cur, best)
    if epoch >= cfg.max_epochs:
        return StopDecision(True, "max-epochs", epoch, cur, best)
    return StopDecision(False, "none", epoch, cur, best)


@dataclass
class ItoResult:
    encoder: Encoder
    raw_state: dict[str, np.ndarray]
    trajectory: list[float]
    decision: StopDecision
    level: str


def run_ito(
    images: ImagePyramid,
    level: str,
    model: WsiInr,
    encoder: Encoder,
    cfg: ItoConfig,
    window: int,
) -> ItoResult:
    """Fit only ``encoder`` to one slide's image at ``level``; the model stays frozen.

    Masks are stripped before anything else happens. On return the encoder
    holds its EMA weights; the last raw weights are in ``raw_state``.
    """
    if isinstance(images, SlidePyramid):
        images = images.images_only()
    k = level_index(level)
    before = params_digest(model.params)
    model.set_trainable([])
    params = encoder.params()
    if not params:
        decision = StopDecision(True, "none", 0, float("nan"), float("nan"))
        return ItoResult(encoder, {}, [], decision, level)
    encoder.set_trainable(True)
    adam = AdamState(cfg.lr)
    ema = EmaState.track(params, cfg.ema_decay, cfg.ema_warmup)
    boxes = window_grid(images.level_shape(k), window)
    windows = [make_window(images, k, b, level) for b in boxes]
    trajectory: list[float] = []
    while True:
        sq, count = 0.0, 0
        for win in windows:
            with Tape() as tape:
                rec = model.rec_head(model.decode(model.features(encoder, win)))
                loss = mse_loss(rec, win.image)
            tape.backward(loss.total)
            leaked = [n for n, t in model.params.items() if t.grad is not None]
            if leaked:
                raise InvariantViolation(f"gradient reached frozen parameters {leaked[:3]}")
            adam_step(params, _trainable_grads(params), adam)
            ema_update(ema, params)
            _clear_grads(params.values())
            sq += loss.value * win.image.size
            count += win.image.size
        trajectory.append(sq / count)
        decision = check_stop(trajectory, cfg)
        if decision.stop:
            break
    raw = {n: t.data for n, t in params.items()}
    ema_swap(ema, params)
    encoder.set_trainable(False)
    if params_digest(model.params) != before:
        raise InvariantViolation("inference-time optimization modified global parameters")
    return ItoResult(encoder, raw, trajectory, decision, level)


@dataclass
class DenseOutput:
    reconstruction: np.ndarray
    probability: np.ndarray
    mask: np.ndarray
    level: str


def infer_dense(images: ImagePyramid, level: str, model: WsiInr, encoder: Encoder, window: int) -> DenseOutput:
    """Query every pixel center of ``level`` window by window and stitch."""
    k = level_index(level)
    shape = images.level_shape(k)
    recon = np.zeros(shape + (3,))
    prob = np.zeros(shape)
    with no_tape():
        for box in window_grid(shape, window):
            win = make_window(images, k, box, level)
            rec, seg = model.forward(encoder, win)
            rs, cs = owned_region(box, shape, window)
            r0, c0 = box[0], box[1]
            recon[r0 + rs.start : r0 + rs.stop, c0 + cs.start : c0 + cs.stop] = rec.data[rs, cs]
            prob[r0 + rs.start : r0 + rs.stop, c0 + cs.start : c0 + cs.stop] = seg.data[rs, cs, 1]
    # argmax over [background, lesion]; ties go to background
    return DenseOutput(recon, prob, prob > 0.5, level)


def evaluate_slide(out: DenseOutput, slide: SlidePyramid) -> dict:
    k = level_index(out.level)
    rep = dice_metric(out.mask, slide.masks[k], out.level)
    return {
        "slide": slide.slide_id,
        "level": out.level,
        "dice": rep.dice,
        "psnr": psnr(out.reconstruction, slide.images[k]),
        "tp": rep.tp,
        "fp": rep.fp,
        "fn": rep.fn,
    }


def training_metrics(slides: Sequence[SlidePyramid], state: TrainState, levels: Sequence[str] = ("base",)) -> list[dict]:
    rows = []
    for s in slides:
        for tag in levels:
            out = infer_dense(s, tag, state.model, state.encoders[s.slide_id], state.config.data.window)
            rows.append(evaluate_slide(out, s))
    return rows
