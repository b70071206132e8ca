"""Synthetic pseudo-slides, image/mask ingestion, pyramids and window sampling."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from PIL import Image

from .errors import DataError, DomainError, GenerationError
from .model import WindowBatch

LEVEL_TAGS = ("base", "base/2", "base/4")


def level_index(tag: str) -> int:
    try:
        return LEVEL_TAGS.index(tag)
    except ValueError:
        raise DomainError(f"unknown level tag {tag!r}; expected one of {LEVEL_TAGS}") from None


def tag_filename(tag: str) -> str:
    """``base/2`` -> ``base_2`` for use inside file names."""
    return tag.replace("/", "_")


@dataclass
class ImagePyramid:
    """Image levels only. This is all inference-time optimization ever sees."""

    slide_id: str
    images: list[np.ndarray]
    base_shape: tuple[int, int]

    @property
    def scale(self) -> int:
        return max(self.base_shape)

    @property
    def domain(self) -> tuple[float, float]:
        """Normalized extent (w_n, h_n); the longer side spans 1."""
        H, W = self.base_shape
        return W / self.scale, H / self.scale

    def level_shape(self, k: int) -> tuple[int, int]:
        return self.images[k].shape[:2]

    def image(self, tag: str) -> np.ndarray:
        return self.images[level_index(tag)]


@dataclass
class SlidePyramid(ImagePyramid):
    masks: list[np.ndarray] = field(default_factory=list, repr=False)

    def images_only(self) -> ImagePyramid:
        return ImagePyramid(self.slide_id, self.images, self.base_shape)

    def mask(self, tag: str) -> np.ndarray:
        return self.masks[level_index(tag)]


def _downsample_image(img: np.ndarray) -> np.ndarray:
    H, W = img.shape[:2]
    h2, w2 = math.ceil(H / 2), math.ceil(W / 2)
    pad = [(0, 2 * h2 - H), (0, 2 * w2 - W)] + [(0, 0)] * (img.ndim - 2)
    ones = np.pad(np.ones((H, W)), pad[:2])
    summed = np.pad(img, pad).reshape(h2, 2, w2, 2, *img.shape[2:]).sum(axis=(1, 3))
    counts = ones.reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    if img.ndim == 3:
        counts = counts[..., None]
    return summed / counts


def _downsample_mask(mask: np.ndarray) -> np.ndarray:
    H, W = mask.shape
    h2, w2 = math.ceil(H / 2), math.ceil(W / 2)
    pad = [(0, 2 * h2 - H), (0, 2 * w2 - W)]
    pos = np.pad(mask.astype(np.int64), pad).reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    counts = np.pad(np.ones((H, W), dtype=np.int64), pad).reshape(h2, 2, w2, 2).sum(axis=(1, 3))
    # ties go to lesion
    return (2 * pos >= counts) & (pos > 0)


def build_pyramid(image: np.ndarray, mask: np.ndarray | None, n_levels: int = 3, slide_id: str = "") -> SlidePyramid:
    """Repeated 2x2 area averaging; masks by majority vote with ties to lesion."""
    if n_levels < 1:
        raise ValueError("n_levels must be >= 1")
    image = np.asarray(image, dtype=np.float64)
    H, W = image.shape[:2]
    if min(H, W) < 2 ** (n_levels - 1):
        raise DataError(f"{H}x{W} image too small for {n_levels} pyramid levels")
    if mask is None:
        mask = np.zeros((H, W), dtype=bool)
    mask = np.asarray(mask).astype(bool)
    if mask.shape != (H, W):
        raise DataError(f"mask {mask.shape} does not match image {H}x{W}")
    images, masks = [image], [mask]
    for _ in range(1, n_levels):
        images.append(_downsample_image(images[-1]))
        masks.append(_downsample_mask(masks[-1]))
    return SlidePyramid(slide_id, images, (H, W), masks)


# -- coordinates ---------------------------------------------------------------


def pixel_to_coords(rows, cols, level: int, pyramid: ImagePyramid) -> np.ndarray:
    """Pixel centers at ``level`` -> normalized (x, y), shape ... x 2."""
    rows = np.asarray(rows, dtype=np.float64)
    cols = np.asarray(cols, dtype=np.float64)
    h, w = pyramid.level_shape(level)
    if (rows < 0).any() or (cols < 0).any() or (rows >= h).any() or (cols >= w).any():
        raise DomainError(f"pixel outside the {h}x{w} grid of level {level}")
    step = 2.0**level / pyramid.scale
    wn, hn = pyramid.domain
    x = np.minimum((cols + 0.5) * step, wn)
    y = np.minimum((rows + 0.5) * step, hn)
    return np.stack([x, y], axis=-1)


def normalize_coords(pixel: tuple[int, int], level: int, pyramid: ImagePyramid) -> tuple[float, float]:
    x, y = pixel_to_coords(pixel[0], pixel[1], level, pyramid)
    return float(x), float(y)


def denormalize_coords(xy: tuple[float, float], level: int, pyramid: ImagePyramid) -> tuple[int, int]:
    """Inverse of ``normalize_coords``: the level pixel containing (x, y)."""
    x, y = xy
    wn, hn = pyramid.domain
    if not (0.0 <= x <= wn and 0.0 <= y <= hn):
        raise DomainError(f"({x}, {y}) outside the slide domain [0,{wn}]x[0,{hn}]")
    h, w = pyramid.level_shape(level)
    step = 2.0**level / pyramid.scale
    return min(int(y / step), h - 1), min(int(x / step), w - 1)


# -- windows --------------------------------------------------------------------


def _starts(n: int, win: int) -> list[int]:
    starts = list(range(0, n - win + 1, win))
    if starts[-1] + win < n:
        starts.append(n - win)
    return starts


@dataclass
class WindowSampler:
    size: int = 64
    order: str = "sequential"
    seed: int = 0
    tissue_threshold: float | None = None

    def __post_init__(self):
        if self.order not in ("sequential", "random"):
            raise ValueError(f"unknown window order {self.order!r}")


def window_grid(shape: tuple[int, int], size: int) -> list[tuple[int, int, int, int]]:
    """Window boxes ``(r0, c0, h, w)`` tiling a level; the last row/column shifts inward."""
    h, w = shape
    wh, ww = min(size, h), min(size, w)
    return [(r, c, wh, ww) for r in _starts(h, wh) for c in _starts(w, ww)]


def owned_region(box: tuple[int, int, int, int], shape: tuple[int, int], size: int) -> tuple[slice, slice]:
    """The part of ``box`` no earlier window in the grid covers (used for stitching)."""
    r0, c0, wh, ww = box
    h, w = shape
    rs = _starts(h, min(size, h))
    cs = _starts(w, min(size, w))
    i, j = rs.index(r0), cs.index(c0)
    rlo = r0 if i == 0 else max(r0, rs[i - 1] + wh)
    clo = c0 if j == 0 else max(c0, cs[j - 1] + ww)
    return slice(rlo - r0, wh), slice(clo - c0, ww)


def make_window(pyramid: ImagePyramid, level: int, box: tuple[int, int, int, int], tag: str | None = None) -> WindowBatch:
    r0, c0, wh, ww = box
    rr, cc = np.meshgrid(np.arange(r0, r0 + wh), np.arange(c0, c0 + ww), indexing="ij")
    coords = pixel_to_coords(rr.ravel(), cc.ravel(), level, pyramid)
    image = pyramid.images[level][r0 : r0 + wh, c0 : c0 + ww]
    mask = None
    if isinstance(pyramid, SlidePyramid) and pyramid.masks:
        mask = pyramid.masks[level][r0 : r0 + wh, c0 : c0 + ww]
    return WindowBatch(pyramid.slide_id, tag or LEVEL_TAGS[level], (r0, c0), (wh, ww), coords, image, mask)


def sample_windows(pyramid: ImagePyramid, level: int, sampler: WindowSampler, epoch: int = 0) -> Iterator[WindowBatch]:
    """Yield the windows tiling ``level`` once, in sequential or seeded-random order."""
    boxes = window_grid(pyramid.level_shape(level), sampler.size)
    if sampler.order == "random":
        rng = np.random.default_rng([sampler.seed, epoch, level])
        boxes = [boxes[i] for i in rng.permutation(len(boxes))]
    for box in boxes:
        win = make_window(pyramid, level, box)
        if sampler.tissue_threshold is not None and win.image is not None:
            white = (win.image.mean(axis=-1) > 0.9).mean()
            if white > sampler.tissue_threshold:
                continue
        yield win


# -- synthetic slides -----------------------------------------------------------


@dataclass
class SyntheticSpec:
    seed: int = 0
    height: int = 512
    width: int = 512
    blob_count: tuple[int, int] = (2, 5)
    blob_scale: tuple[float, float] = (0.06, 0.12)
    background_freqs: tuple[int, ...] = (4, 8, 16, 32, 64)
    lesion_freqs: tuple[int, ...] = (16, 32, 64)
    background_palette: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.95, 0.80, 0.88),
        (0.78, 0.48, 0.68),
    )
    lesion_palette: tuple[tuple[float, float, float], tuple[float, float, float]] = (
        (0.55, 0.32, 0.66),
        (0.28, 0.12, 0.42),
    )
    noise_amplitude: float = 0.02
    lesion_fraction: tuple[float, float] = (0.05, 0.4)
    max_retries: int = 50

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSpec":
        conv = {}
        for k, v in d.items():
            conv[k] = tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v
        return cls(**conv)


def value_noise(rng: np.random.Generator, shape: tuple[int, int], freq: int) -> np.ndarray:
    """Smooth noise in [0, 1]: random lattice values, smoothstep-interpolated."""
    H, W = shape
    grid = rng.random((freq + 1, freq + 1))
    y = np.linspace(0, freq, H, endpoint=False) + 0.5 * freq / H
    x = np.linspace(0, freq, W, endpoint=False) + 0.5 * freq / W
    y0 = np.minimum(y.astype(int), freq - 1)
    x0 = np.minimum(x.astype(int), freq - 1)
    ty = y - y0
    tx = x - x0
    ty = ty * ty * (3 - 2 * ty)
    tx = tx * tx * (3 - 2 * tx)
    g00 = grid[y0][:, x0]
    g01 = grid[y0][:, x0 + 1]
    g10 = grid[y0 + 1][:, x0]
    g11 = grid[y0 + 1][:, x0 + 1]
    top = g00 * (1 - tx) + g01 * tx
    bot = g10 * (1 - tx) + g11 * tx
    return top * (1 - ty[:, None]) + bot * ty[:, None]


def fractal_noise(rng: np.random.Generator, shape: tuple[int, int], freqs: Sequence[int]) -> np.ndarray:
    acc = np.zeros(shape)
    norm = 0.0
    for o, f in enumerate(freqs):
        amp = 0.6**o
        acc += amp * value_noise(rng, shape, f)
        norm += amp
    acc /= norm
    lo, hi = acc.min(), acc.max()
    return (acc - lo) / (hi - lo) if hi > lo else np.zeros(shape)


def _blob_mask(rng: np.random.Generator, spec: SyntheticSpec, n_blobs: int) -> np.ndarray:
    H, W = spec.height, spec.width
    S = max(H, W)
    yy, xx = np.meshgrid((np.arange(H) + 0.5) / S, (np.arange(W) + 0.5) / S, indexing="ij")
    field_ = np.zeros((H, W))
    for _ in range(n_blobs):
        cx = rng.uniform(0.1, 0.9) * W / S
        cy = rng.uniform(0.1, 0.9) * H / S
        sx = rng.uniform(*spec.blob_scale)
        sy = sx * rng.uniform(0.6, 1.6)
        field_ = np.maximum(field_, np.exp(-0.5 * (((xx - cx) / sx) ** 2 + ((yy - cy) / sy) ** 2)))
    wobble = value_noise(rng, (H, W), 4) - 0.5
    return field_ * (1.0 + 0.8 * wobble) > 0.5


def _palette(t: np.ndarray, pal) -> np.ndarray:
    a, b = np.asarray(pal[0]), np.asarray(pal[1])
    return a[None, None] * (1 - t[..., None]) + b[None, None] * t[..., None]


def generate_synthetic(spec: SyntheticSpec, slide_id: str | None = None, n_levels: int = 3) -> SlidePyramid:
    """Pseudo-slide: fractal-noise tissue with textured lesion blobs of a distinct palette."""
    H, W = spec.height, spec.width
    if min(H, W) < 128:
        raise GenerationError(f"canvas {H}x{W} below the 128x128 minimum")
    rng = np.random.default_rng(spec.seed)
    n_blobs = int(rng.integers(spec.blob_count[0], spec.blob_count[1] + 1))
    lo, hi = spec.lesion_fraction
    for _ in range(spec.max_retries):
        mask = _blob_mask(rng, spec, n_blobs)
        frac = mask.mean()
        if n_blobs == 0 or lo <= frac <= hi:
            break
    else:
        raise GenerationError(f"seed {spec.seed}: no lesion layout within fraction bounds [{lo}, {hi}]")
    tissue = _palette(fractal_noise(rng, (H, W), spec.background_freqs), spec.background_palette)
    lesion = _palette(fractal_noise(rng, (H, W), spec.lesion_freqs), spec.lesion_palette)
    image = np.where(mask[..., None], lesion, tissue)
    image = image + spec.noise_amplitude * rng.standard_normal(image.shape)
    image = np.clip(image, 0.0, 1.0)
    return build_pyramid(image, mask, n_levels, slide_id or f"syn{spec.seed:04d}")


# -- files ----------------------------------------------------------------------


def load_png(path: str | Path) -> np.ndarray:
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if im.mode not in ("RGB", "RGBA", "L", "P"):
        raise DataError(f"{path}: unsupported mode {im.mode} (need 8-bit RGB)")
    return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def load_mask_png(path: str | Path) -> np.ndarray:
    try:
        im = Image.open(path)
        im.load()
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    if im.mode not in ("L", "1", "P"):
        raise DataError(f"{path}: mask must be single-channel 8-bit, got {im.mode}")
    return np.asarray(im.convert("L")) > 127


def to_uint8(arr: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(arr, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_png(path: str | Path, arr: np.ndarray) -> None:
    """Save [0, 1] RGB, [0, 1] grayscale or boolean arrays as 8-bit PNG."""
    arr = np.asarray(arr)
    data = (arr.astype(np.uint8) * 255) if arr.dtype == bool else to_uint8(arr)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data).save(path, optimize=False)


def load_slide(slide_id: str, image_path, mask_path=None, n_levels: int = 3) -> SlidePyramid:
    image = load_png(image_path)
    mask = load_mask_png(mask_path) if mask_path else None
    if mask is not None and mask.shape != image.shape[:2]:
        raise DataError(f"{slide_id}: mask {mask.shape} vs image {image.shape[:2]}")
    return build_pyramid(image, mask, n_levels, slide_id)


def write_dataset(root: str | Path, slides: Sequence[tuple[SlidePyramid, str, SyntheticSpec | None]]) -> Path:
    """Write every level of every slide as PNG plus ``manifest.json``."""
    root = Path(root)
    entries = []
    for pyr, split, spec in slides:
        levels = {}
        for k, tag in enumerate(LEVEL_TAGS[: len(pyr.images)]):
            img = root / pyr.slide_id / f"image_{tag_filename(tag)}.png"
            msk = root / pyr.slide_id / f"mask_{tag_filename(tag)}.png"
            save_png(img, pyr.images[k])
            save_png(msk, pyr.masks[k])
            levels[tag] = {"image": str(img.relative_to(root)), "mask": str(msk.relative_to(root))}
        entry = {"id": pyr.slide_id, "split": split, "levels": levels}
        if spec is not None:
            entry["synthetic"] = spec.to_json()
        entries.append(entry)
    manifest = root / "manifest.json"
    manifest.write_text(json.dumps({"slides": entries}, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path: str | Path, split: str | None = None) -> list[SlidePyramid]:
    """Load slides listed in a manifest; the pyramid is rebuilt from the base level."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest {path} not found")
    meta = json.loads(path.read_text())
    out = []
    for e in meta["slides"]:
        if split is not None and e.get("split") != split:
            continue
        base = e["levels"]["base"]
        mask = base.get("mask")
        out.append(load_slide(e["id"], path.parent / base["image"], path.parent / mask if mask else None))
    return out
