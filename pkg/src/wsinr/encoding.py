"""Coordinate encoders: multi-resolution hash grid, NeRF-style sinusoids, identity.

All encoders take an ``N x 2`` array of normalized ``(x, y)`` coordinates in
``[0, 1]^2`` (x runs along image columns, y along rows) and produce an
``N x width`` feature tensor.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import ConfigError, DomainError
from .numerics import Tensor, make_result

PRIME_X = 1
PRIME_Y = 2654435761
INIT_RANGE = 1e-4


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 12
    base_resolution: int = 8
    scale: float = 1.5
    table_size: int = 2**14
    features: int = 2
    dim: int = 2

    def __post_init__(self):
        if self.levels < 1 or self.base_resolution < 1 or self.features < 1:
            raise ConfigError(f"invalid hash grid config {self}")
        if self.scale <= 1.0:
            raise ConfigError(f"per-level scale must exceed 1, got {self.scale}")
        t = self.table_size
        if t < 1 or t & (t - 1):
            raise ConfigError(f"table size {t} is not a power of two")
        if self.dim != 2:
            raise ConfigError("only 2D grids are supported")

    @property
    def width(self) -> int:
        return self.levels * self.features

    def resolutions(self) -> list[int]:
        return [math.floor(self.base_resolution * self.scale**l + 1e-9) for l in range(self.levels)]

    def is_direct(self, level: int) -> bool:
        r = self.resolutions()[level]
        return (r + 1) ** self.dim <= self.table_size

    def table_rows(self, level: int) -> int:
        r = self.resolutions()[level]
        return (r + 1) ** self.dim if self.is_direct(level) else self.table_size


PAPER_HASH_GRID = HashGridConfig(levels=21, base_resolution=16, scale=1.5, table_size=2**21, features=2)
DESK_HASH_GRID = HashGridConfig()


def spatial_hash(vertices: np.ndarray, table_size: int) -> np.ndarray:
    """XOR-of-primes hash of integer 2-vectors into ``[0, table_size)``."""
    if table_size & (table_size - 1):
        raise ConfigError(f"table size {table_size} is not a power of two")
    v = np.asarray(vertices, dtype=np.uint64)
    h = (v[..., 0] * np.uint64(PRIME_X)) ^ (v[..., 1] * np.uint64(PRIME_Y))
    return (h & np.uint64(table_size - 1)).astype(np.int64)


def vertex_index(vertices: np.ndarray, resolution: int, direct: bool, table_size: int) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.int64)
    if direct:
        return v[..., 0] + v[..., 1] * (resolution + 1)
    return spatial_hash(v, table_size)


def collision_rate(resolution: int, table_size: int) -> float:
    """Fraction of the ``(R+1)^2`` lattice vertices that share a hashed row."""
    r = np.arange(resolution + 1)
    grid = np.stack(np.meshgrid(r, r, indexing="ij"), axis=-1).reshape(-1, 2)
    idx = spatial_hash(grid, table_size)
    return 1.0 - np.unique(idx).size / idx.size


def check_coords(coords: np.ndarray) -> np.ndarray:
    c = np.asarray(coords, dtype=np.float64)
    if c.ndim != 2 or c.shape[1] != 2:
        raise DomainError(f"coordinates must be N x 2, got {c.shape}")
    if not np.isfinite(c).all() or c.min(initial=0.0) < 0.0 or c.max(initial=0.0) > 1.0:
        raise DomainError("coordinates outside [0, 1]^2")
    return c


def bilinear_corners(coords: np.ndarray, resolution: int) -> tuple[np.ndarray, np.ndarray]:
    """Cell corner vertices (N x 4 x 2) and their bilinear weights (N x 4).

    Corner order is (0,0), (1,0), (0,1), (1,1) in (x, y) offsets. A query at
    exactly 1.0 falls into the last cell.
    """
    pos = coords * resolution
    base = np.minimum(np.floor(pos), resolution - 1).astype(np.int64)
    frac = pos - base
    fx, fy = frac[:, 0], frac[:, 1]
    weights = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    offsets = np.array([[0, 0], [1, 0], [0, 1], [1, 1]], dtype=np.int64)
    return base[:, None, :] + offsets[None], weights


@dataclass
class EncodedBatch:
    coords: np.ndarray
    features: Tensor
    encoder_id: str

    @property
    def width(self) -> int:
        return self.features.shape[1]


@dataclass
class HashGridEncoder:
    """Learnable per-slide hash grid; one table per level, features concatenated low to high."""

    config: HashGridConfig
    tables: list[Tensor]
    encoder_id: str = ""
    level_mask: tuple[bool, ...] = ()
    kind = "hash"

    def __post_init__(self):
        if not self.level_mask:
            self.level_mask = (True,) * self.config.levels
        if len(self.tables) != self.config.levels or len(self.level_mask) != self.config.levels:
            raise ConfigError("one table and one mask flag per level required")
        self.level_resolutions = self.config.resolutions()
        self.level_modes = ["direct" if self.config.is_direct(l) else "hashed" for l in range(self.config.levels)]

    @classmethod
    def create(cls, config: HashGridConfig, rng: np.random.Generator, encoder_id: str = "") -> "HashGridEncoder":
        tables = []
        for l in range(config.levels):
            data = rng.uniform(-INIT_RANGE, INIT_RANGE, size=(config.table_rows(l), config.features))
            tables.append(Tensor(data, requires_grad=True, name=f"level_{l:02d}"))
        return cls(config, tables, encoder_id)

    @property
    def width(self) -> int:
        return self.config.width

    def params(self) -> dict[str, Tensor]:
        return {f"level_{l:02d}": t for l, t in enumerate(self.tables)}

    def set_trainable(self, flag: bool) -> None:
        for t in self.tables:
            t.requires_grad = flag

    def mask_levels(self, keep: Callable[[int], bool]) -> "HashGridEncoder":
        """A view sharing this encoder's tables with dropped levels zeroed."""
        return replace(self, level_mask=tuple(bool(keep(l)) for l in range(self.config.levels)))

    def lookup(self, coords: np.ndarray, level: int) -> tuple[np.ndarray, np.ndarray]:
        """Row indices (N x 4) and bilinear weights (N x 4) for one level."""
        r = self.level_resolutions[level]
        corners, weights = bilinear_corners(coords, r)
        idx = vertex_index(corners, r, self.level_modes[level] == "direct", self.config.table_size)
        return idx, weights

    def encode(self, coords: np.ndarray) -> EncodedBatch:
        coords = check_coords(coords)
        n, F = coords.shape[0], self.config.features
        out = np.zeros((n, self.width))
        lookups = []
        for l, table in enumerate(self.tables):
            if not self.level_mask[l]:
                lookups.append(None)
                continue
            idx, w = self.lookup(coords, l)
            lookups.append((idx, w))
            out[:, l * F : (l + 1) * F] = np.einsum("nk,nkf->nf", w, table.data[idx])
        rows = [t.shape[0] for t in self.tables]

        def backward(g, needs):
            grads = []
            for l, need in enumerate(needs):
                if not need:
                    grads.append(None)
                    continue
                gt = np.zeros((rows[l], F))
                if lookups[l] is not None:
                    idx, w = lookups[l]
                    flat_idx = idx.ravel()
                    for f in range(F):
                        contrib = (w * g[:, l * F + f][:, None]).ravel()
                        gt[:, f] = np.bincount(flat_idx, weights=contrib, minlength=rows[l])
                grads.append(gt)
            return grads

        feats = make_result(out, tuple(self.tables), backward, "hash_encode")
        return EncodedBatch(coords, feats, self.encoder_id)

    def level_features(self, coords: np.ndarray) -> np.ndarray:
        """N x L x F array of per-level features (no tape)."""
        z = self.encode(coords).features.data
        return z.reshape(z.shape[0], self.config.levels, self.config.features)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params().items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params().items():
            if state[k].shape != t.shape:
                raise ConfigError(f"encoder table {k}: checkpoint shape {state[k].shape} vs {t.shape}")
            t.data = np.array(state[k], dtype=np.float64)


def nerf_encode(coords: np.ndarray, n_freqs: int) -> np.ndarray:
    """Fixed sinusoidal features, ``N x 4*n_freqs``.

    Column layout per axis a in (x, y): ``sin(2^k pi c_a)`` for k < n_freqs,
    then ``cos(2^k pi c_a)`` for k < n_freqs.
    """
    coords = check_coords(coords)
    freqs = (2.0 ** np.arange(n_freqs)) * np.pi
    blocks = []
    for a in range(2):
        arg = coords[:, a : a + 1] * freqs[None, :]
        blocks += [np.sin(arg), np.cos(arg)]
    return np.concatenate(blocks, axis=1)


def identity_encode(coords: np.ndarray) -> np.ndarray:
    return check_coords(coords).copy()


@dataclass
class FixedEncoder:
    """Parameter-free encoder (``none`` or ``nerf-pe``); shared by all slides."""

    kind: str
    n_freqs: int = 10
    encoder_id: str = ""
    level_mask: tuple[bool, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.kind not in ("none", "nerf-pe"):
            raise ConfigError(f"unknown fixed encoder kind {self.kind!r}")

    @property
    def width(self) -> int:
        return 2 if self.kind == "none" else 4 * self.n_freqs

    def params(self) -> dict[str, Tensor]:
        return {}

    def set_trainable(self, flag: bool) -> None:
        pass

    def encode(self, coords: np.ndarray) -> EncodedBatch:
        feats = identity_encode(coords) if self.kind == "none" else nerf_encode(coords, self.n_freqs)
        return EncodedBatch(np.asarray(coords, dtype=np.float64), Tensor(feats), self.encoder_id)

    def state(self) -> dict[str, np.ndarray]:
        return {}

    def load_state(self, state) -> None:
        pass


Encoder = HashGridEncoder | FixedEncoder


def dump_encoding(encoder: HashGridEncoder, coords: np.ndarray, path: str | Path) -> None:
    """Write per-level features for each coordinate as CSV rows ``x,y,level,resolution,mode,f0..``."""
    feats = encoder.level_features(coords)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "level", "resolution", "mode"] + [f"f{i}" for i in range(encoder.config.features)])
        for (x, y), per_level in zip(np.asarray(coords), feats):
            for l, vals in enumerate(per_level):
                w.writerow([repr(float(x)), repr(float(y)), l, encoder.level_resolutions[l], encoder.level_modes[l]]
                           + [repr(float(v)) for v in vals])
