"""Shared dual-branch decoder plus reconstruction and segmentation heads.

Every trainable tensor lives in ``WsiInr.params`` under a group prefix
(``decoder/``, ``rec_head/``, ``seg_head/``). Per-slide encoders are kept
outside the model.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .errors import ConfigError
from .numerics import Tensor

GROUPS = ("decoder", "rec_head", "seg_head")


@dataclass(frozen=True)
class ModelConfig:
    in_width: int = 24
    conv_width: int = 64
    conv_layers: int = 3
    point_width: int = 64
    point_layers: int = 3
    hidden: int = 128
    head_width: int = 64
    dilations: tuple[int, ...] = (1, 2, 4)

    def __post_init__(self):
        if any(d < 1 for d in self.dilations) or list(self.dilations) != sorted(set(self.dilations)):
            raise ConfigError(f"dilations must be strictly increasing and >= 1: {self.dilations}")
        if min(self.conv_layers, self.point_layers) < 1:
            raise ConfigError("each decoder branch needs at least one layer")


@dataclass
class WindowBatch:
    """Pixel-center coordinates of one window plus aligned crops.

    ``coords`` enumerates the window row-major as (x, y) pairs.
    """

    slide_id: str
    level: str
    origin: tuple[int, int]
    size: tuple[int, int]
    coords: np.ndarray
    image: np.ndarray | None = None
    mask: np.ndarray | None = field(default=None, repr=False)


def _kaiming(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class WsiInr:
    def __init__(self, config: ModelConfig, rng: np.random.Generator):
        self.config = config
        self.params: dict[str, Tensor] = {}
        c = config
        width = c.in_width
        for i in range(c.conv_layers):
            self._conv(rng, f"decoder/conv{i}", 3, width, c.conv_width)
            width = c.conv_width
        width = c.in_width
        for i in range(c.point_layers):
            self._conv(rng, f"decoder/point{i}", 1, width, c.point_width)
            width = c.point_width
        self._conv(rng, "decoder/fuse", 1, c.conv_width + c.point_width, c.hidden)
        for head, out_ch in (("rec_head", 3), ("seg_head", 2)):
            self._conv(rng, f"{head}/in", 1, c.hidden, c.head_width)
            for b, _ in enumerate(c.dilations):
                self._conv(rng, f"{head}/block{b}a", 3, c.head_width, c.head_width)
                self._conv(rng, f"{head}/block{b}b", 3, c.head_width, c.head_width)
            self._conv(rng, f"{head}/out", 1, c.head_width, out_ch)

    def _conv(self, rng, name: str, k: int, cin: int, cout: int) -> None:
        self.params[f"{name}.w"] = Tensor(_kaiming(rng, (k, k, cin, cout), k * k * cin), True, f"{name}.w")
        self.params[f"{name}.b"] = Tensor(np.zeros(cout), True, f"{name}.b")

    def _apply(self, x: Tensor, name: str, dilation: int = 1) -> Tensor:
        return nx.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], dilation)

    def group(self, name: str) -> dict[str, Tensor]:
        prefix = name + "/"
        return {k: v for k, v in self.params.items() if k.startswith(prefix)}

    def groups(self) -> dict[str, dict[str, Tensor]]:
        return {g: self.group(g) for g in GROUPS}

    def set_trainable(self, groups) -> None:
        """Make exactly the listed groups trainable; freeze the rest."""
        wanted = set(groups)
        for k, t in self.params.items():
            t.requires_grad = k.split("/", 1)[0] in wanted

    def decode(self, z: Tensor) -> Tensor:
        if z.data.ndim != 3 or z.shape[2] != self.config.in_width:
            raise ConfigError(f"decoder expects H x W x {self.config.in_width} features, got {z.shape}")
        a = z
        for i in range(self.config.conv_layers):
            a = nx.relu(self._apply(a, f"decoder/conv{i}"))
        p = z
        for i in range(self.config.point_layers):
            p = nx.relu(self._apply(p, f"decoder/point{i}"))
        return nx.relu(self._apply(nx.concat([a, p], axis=2), "decoder/fuse"))

    def _head(self, name: str, h: Tensor) -> Tensor:
        x = nx.relu(self._apply(h, f"{name}/in"))
        for b, d in enumerate(self.config.dilations):
            y = nx.relu(self._apply(x, f"{name}/block{b}a", d))
            y = self._apply(y, f"{name}/block{b}b", d)
            x = nx.relu(nx.add(x, y))
        return self._apply(x, f"{name}/out")

    def rec_head(self, h: Tensor) -> Tensor:
        return nx.sigmoid(self._head("rec_head", h))

    def seg_head(self, h: Tensor) -> Tensor:
        """Per-pixel [background, lesion] probabilities."""
        return nx.softmax(self._head("seg_head", h))

    def features(self, encoder, window: WindowBatch) -> Tensor:
        H, W = window.size
        z = encoder.encode(window.coords).features
        return nx.reshape(z, (H, W, z.shape[1]))

    def forward(self, encoder, window: WindowBatch) -> tuple[Tensor, Tensor]:
        h = self.decode(self.features(encoder, window))
        return self.rec_head(h), self.seg_head(h)

    def state(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in state or state[k].shape != t.shape:
                raise ConfigError(f"checkpoint lacks a matching tensor for {k}")
            t.data = np.array(state[k], dtype=np.float64)

    def n_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def config_dict(self) -> dict:
        return asdict(self.config)


def params_digest(params: dict[str, Tensor]) -> str:
    """SHA-256 over names and raw bytes, for bitwise freeze checks."""
    h = hashlib.sha256()
    for k in sorted(params):
        h.update(k.encode())
        h.update(params[k].data.tobytes())
    return h.hexdigest()
