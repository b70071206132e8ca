"""Adam and a parameter EMA.

Both operate on ``dict[str, Tensor]`` parameter maps. Updates rebind
``Tensor.data`` to fresh arrays rather than writing in place, so arrays held
by an old tape are never disturbed.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..errors import ShapeError
from .tensor import Tensor


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray | None],
    state: AdamState,
) -> Mapping[str, Tensor]:
    """One bias-corrected Adam update of every parameter that has a gradient.

    Parameters whose gradient is ``None`` are left untouched (their moments
    are not advanced either).
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam: grad {g.shape} vs param {p.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        elif m.shape != p.shape:
            raise ShapeError(f"adam: moment buffer {m.shape} vs param {p.shape} for {name}")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * state.v[name] + (1.0 - state.beta2) * (g * g)
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


@dataclass
class EmaState:
    """Shadow parameters.

    With ``warmup`` the effective decay after n updates is
    ``min(decay, (1 + n) / (10 + n))`` so short runs are not dominated by the
    initial values.
    """

    decay: float
    shadow: dict[str, np.ndarray] = field(default_factory=dict)
    warmup: bool = False
    updates: int = 0

    @classmethod
    def track(cls, params: Mapping[str, Tensor], decay: float, warmup: bool = False) -> "EmaState":
        if not 0.0 <= decay < 1.0:
            raise ValueError(f"EMA decay {decay} outside [0, 1)")
        return cls(decay, {k: p.data.copy() for k, p in params.items()}, warmup)

    def effective_decay(self) -> float:
        if not self.warmup:
            return self.decay
        return min(self.decay, (1.0 + self.updates) / (10.0 + self.updates))


def ema_update(state: EmaState, params: Mapping[str, Tensor]) -> EmaState:
    b = state.effective_decay()
    state.updates += 1
    for name, p in params.items():
        s = state.shadow[name]
        if s.shape != p.shape:
            raise ShapeError(f"ema: shadow {s.shape} vs param {p.shape} for {name}")
        state.shadow[name] = b * s + (1.0 - b) * p.data
    return state


def ema_swap(state: EmaState, params: Mapping[str, Tensor]) -> None:
    """Exchange shadow and live arrays; calling it twice restores both exactly."""
    for name, p in params.items():
        p.data, state.shadow[name] = state.shadow[name], p.data
