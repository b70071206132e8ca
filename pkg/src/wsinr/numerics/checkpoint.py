"""Single-file checkpoints.

Layout::

    b"WSINRCK1"                    8-byte magic
    uint64 little-endian           manifest length in bytes
    manifest                       UTF-8 JSON: {"tensors": [{name, shape, offset}], "meta": {...}}
    payload                        little-endian float64 arrays, offsets relative to payload start
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from ..errors import CheckpointError
from .optim import AdamState, EmaState

MAGIC = b"WSINRCK1"


def save_checkpoint(path: str | Path, tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> None:
    entries = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    manifest = json.dumps({"tensors": entries, "meta": dict(meta or {})}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(manifest)))
        fh.write(manifest)
        for name in sorted(tensors):
            fh.write(np.ascontiguousarray(tensors[name], dtype="<f8").tobytes())


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<Q", raw[8:16])
    try:
        manifest = json.loads(raw[16 : 16 + n])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    payload = memoryview(raw)[16 + n :]
    out = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 8 * count
        if end > len(payload):
            raise CheckpointError(f"{path}: tensor {e['name']} truncated")
        out[e["name"]] = np.frombuffer(payload[e["offset"] : end], dtype="<f8").reshape(e["shape"]).astype(np.float64)
    return out, manifest["meta"]


def adam_to_tensors(state: AdamState, prefix: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    tensors = {f"{prefix}/m/{k}": v for k, v in state.m.items()}
    tensors.update({f"{prefix}/v/{k}": v for k, v in state.v.items()})
    meta = {"lr": state.lr, "beta1": state.beta1, "beta2": state.beta2, "eps": state.eps, "step": state.step}
    return tensors, meta


def adam_from_tensors(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any], prefix: str) -> AdamState:
    state = AdamState(meta["lr"], meta["beta1"], meta["beta2"], meta["eps"], int(meta["step"]))
    for key, arr in tensors.items():
        if key.startswith(prefix + "/m/"):
            state.m[key[len(prefix) + 3 :]] = arr
        elif key.startswith(prefix + "/v/"):
            state.v[key[len(prefix) + 3 :]] = arr
    return state


def ema_to_tensors(state: EmaState, prefix: str) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    return {f"{prefix}/{k}": v for k, v in state.shadow.items()}, {"decay": state.decay, "warmup": state.warmup, "updates": state.updates}


def ema_from_tensors(tensors: Mapping[str, np.ndarray], meta: Mapping[str, Any], prefix: str) -> EmaState:
    shadow = {k[len(prefix) + 1 :]: v for k, v in tensors.items() if k.startswith(prefix + "/")}
    return EmaState(meta["decay"], shadow, bool(meta.get("warmup", False)), int(meta.get("updates", 0)))
