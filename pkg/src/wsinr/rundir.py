"""Run-directory layout: config, checkpoints, metrics and per-slide outputs."""

from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import RunConfig, config_hash, load_config, to_json
from .data import save_png, tag_filename
from .encoding import Encoder, HashGridEncoder
from .errors import CheckpointError, ConfigError
from .numerics import adam_from_tensors, adam_to_tensors, load_checkpoint, save_checkpoint
from .pipeline import DenseOutput, ItoResult, TrainState, make_encoder

METRIC_FIELDS = ["slide", "level", "dice", "psnr", "tp", "fp", "fn", "source"]


class RunDir:
    def __init__(self, path: str | Path):
        self.path = Path(path)

    # config ----------------------------------------------------------------
    @property
    def config_path(self) -> Path:
        return self.path / "config.json"

    def write_config(self, cfg: RunConfig) -> None:
        """Serialize the resolved config; an existing run must match it exactly."""
        text = to_json(cfg)
        if self.config_path.exists():
            old = load_config(self.config_path)
            if config_hash(old) != config_hash(cfg):
                raise ConfigError(f"{self.path} already holds a run with a different config")
            return
        self.path.mkdir(parents=True, exist_ok=True)
        self.config_path.write_text(text)
        (self.path / "config.hash").write_text(config_hash(cfg) + "\n")

    def config(self) -> RunConfig:
        if not self.config_path.exists():
            raise ConfigError(f"{self.path} is not a run directory (no config.json)")
        return load_config(self.config_path)

    # checkpoints -----------------------------------------------------------
    def checkpoint(self, name: str) -> Path:
        return self.path / "checkpoints" / f"{name}.ckpt"

    def save_state(self, state: TrainState, name: str) -> Path:
        tensors = {f"model/{k}": v for k, v in state.model.state().items()}
        meta = {
            "config_hash": config_hash(state.config),
            "completed": list(state.completed),
            "epochs_done": state.epochs_done,
            "history": state.history,
            "slides": sorted(state.encoders),
        }
        t, m = adam_to_tensors(state.net_adam, "opt/net")
        tensors.update(t)
        meta["opt/net"] = m
        for sid, enc in state.encoders.items():
            tensors.update({f"enc/{sid}/{k}": v.data for k, v in enc.params().items()})
            t, m = adam_to_tensors(state.enc_adam[sid], f"opt/enc/{sid}")
            tensors.update(t)
            meta[f"opt/enc/{sid}"] = m
        path = self.checkpoint(name)
        save_checkpoint(path, tensors, meta)
        return path

    def load_state(self, cfg: RunConfig, name: str) -> TrainState:
        path = self.checkpoint(name)
        if not path.exists():
            raise CheckpointError(f"checkpoint {path} not found")
        tensors, meta = load_checkpoint(path)
        if meta.get("config_hash") != config_hash(cfg):
            raise CheckpointError(
                f"{path} was written under config {meta.get('config_hash')}, current config is {config_hash(cfg)}"
            )
        state = TrainState.create(cfg, meta["slides"])
        state.model.load_state({k[6:]: v for k, v in tensors.items() if k.startswith("model/")})
        state.net_adam = adam_from_tensors(tensors, meta["opt/net"], "opt/net")
        for sid, enc in state.encoders.items():
            _load_encoder(enc, {k[len(f"enc/{sid}/") :]: v for k, v in tensors.items() if k.startswith(f"enc/{sid}/")}, path)
            state.enc_adam[sid] = adam_from_tensors(tensors, meta[f"opt/enc/{sid}"], f"opt/enc/{sid}")
        state.completed = list(meta["completed"])
        state.epochs_done = int(meta["epochs_done"])
        state.history = list(meta["history"])
        return state

    def latest_state(self, cfg: RunConfig) -> TrainState | None:
        for name in ("stage2", "latest", "stage1"):
            if self.checkpoint(name).exists():
                return self.load_state(cfg, name)
        return None

    def trained_state(self, cfg: RunConfig) -> TrainState:
        if not self.checkpoint("stage2").exists():
            raise CheckpointError(f"{self.path}: no completed training (checkpoints/stage2.ckpt missing)")
        return self.load_state(cfg, "stage2")

    # tables ----------------------------------------------------------------
    def write_history(self, state: TrainState) -> None:
        with open(self.path / "history.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["stage", "epoch", "slide", "loss"])
            for h in state.history:
                w.writerow([h["stage"], h["epoch"], h["slide"], repr(h["loss"])])

    def write_metrics(self, rows: Sequence[dict], source: str) -> None:
        """Replace the rows of ``source`` in metrics.csv, keeping other sources."""
        path = self.path / "metrics.csv"
        kept = []
        if path.exists():
            with open(path, newline="") as fh:
                kept = [r for r in csv.DictReader(fh) if r["source"] != source]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(METRIC_FIELDS)
            for r in kept:
                w.writerow([r[f] for f in METRIC_FIELDS])
            for r in rows:
                w.writerow([r["slide"], r["level"], f"{r['dice']:.6f}", f"{r['psnr']:.4f}", r["tp"], r["fp"], r["fn"], source])

    # per-slide outputs -----------------------------------------------------
    def slide_dir(self, slide_id: str) -> Path:
        return self.path / "outputs" / slide_id

    def write_dense(self, out: DenseOutput, slide_id: str) -> Path:
        d = self.slide_dir(slide_id) / tag_filename(out.level)
        save_png(d / "reconstruction.png", out.reconstruction)
        save_png(d / "probmap.png", out.probability)
        save_png(d / "mask.png", out.mask)
        return d

    def ito_dir(self, slide_id: str, level: str) -> Path:
        return self.slide_dir(slide_id) / f"ito_{tag_filename(level)}"

    def write_ito(self, res: ItoResult, slide_id: str, cfg: RunConfig) -> Path:
        d = self.ito_dir(slide_id, res.level)
        d.mkdir(parents=True, exist_ok=True)
        (d / "stop_reason.txt").write_text(res.decision.reason + "\n")
        with open(d / "mse_trajectory.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "mse"])
            for i, v in enumerate(res.trajectory, 1):
                w.writerow([i, repr(v)])
        save_encoder(d / "encoder.ckpt", res.encoder, cfg, {"level": res.level, "stop": res.decision.reason})
        return d

    def load_ito_encoder(self, slide_id: str, level: str, cfg: RunConfig) -> Encoder:
        path = self.ito_dir(slide_id, level) / "encoder.ckpt"
        if not path.exists():
            raise CheckpointError(f"no adapted encoder for {slide_id} at {level}; run `ito` first")
        return load_encoder(path, slide_id, cfg)


def _load_encoder(enc: Encoder, tensors: dict[str, np.ndarray], path) -> None:
    params = enc.params()
    if set(params) != set(tensors):
        raise CheckpointError(f"{path}: encoder tensors do not match the configured encoder")
    for k, t in params.items():
        if tensors[k].shape != t.shape:
            raise CheckpointError(f"{path}: {k} has shape {tensors[k].shape}, expected {t.shape}")
        t.data = np.array(tensors[k])


def save_encoder(path: Path, enc: Encoder, cfg: RunConfig, meta: dict | None = None) -> None:
    save_checkpoint(path, {k: t.data for k, t in enc.params().items()}, {"config_hash": config_hash(cfg), **(meta or {})})


def load_encoder(path: Path, slide_id: str, cfg: RunConfig) -> Encoder:
    tensors, meta = load_checkpoint(path)
    if meta.get("config_hash") != config_hash(cfg):
        raise CheckpointError(f"{path} was written under a different config")
    enc = make_encoder(cfg, slide_id)
    if isinstance(enc, HashGridEncoder):
        _load_encoder(enc, tensors, path)
    return enc


def read_json(path: Path) -> dict:
    return json.loads(Path(path).read_text())
