"""Central finite-difference oracle for tape gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from ..errors import OracleInvalidError
from .tensor import Tape, Tensor, kink_monitor, no_tape

LossFn = Callable[[], Tensor]


@dataclass
class GroupCheck:
    group: str
    frozen: bool
    max_rel_err: float = 0.0
    max_abs_grad: float = 0.0
    n_checked: int = 0
    n_nonsmooth: int = 0

    def passed(self, tolerance: float) -> bool:
        if self.frozen:
            return self.max_abs_grad == 0.0
        return self.n_checked > 0 and self.max_rel_err < tolerance


@dataclass
class GradCheckReport:
    tolerance: float
    step: float
    groups: dict[str, GroupCheck] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(g.passed(self.tolerance) for g in self.groups.values())

    @property
    def max_rel_err(self) -> float:
        return max((g.max_rel_err for g in self.groups.values()), default=0.0)

    def lines(self) -> list[str]:
        out = []
        for g in self.groups.values():
            status = "PASS" if g.passed(self.tolerance) else "FAIL"
            if g.frozen:
                out.append(f"{status} {g.group}: frozen, max |grad| = {g.max_abs_grad:.1e}")
            else:
                out.append(
                    f"{status} {g.group}: max rel err {g.max_rel_err:.3e} over {g.n_checked} entries"
                    f" ({g.n_nonsmooth} skipped at kinks)"
                )
        return out


def relative_error(analytic: float, numeric: float, floor: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _evaluate(loss_fn: LossFn) -> tuple[float, list[bytes]]:
    with no_tape(), kink_monitor() as log:
        value = loss_fn().item()
    return value, log


def _pick_entries(grad: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    flat = grad.ravel()
    if flat.size <= n:
        return rng.permutation(flat.size)
    nz = np.flatnonzero(flat)
    n_nz = min(nz.size, n - n // 4)
    chosen = rng.choice(nz, size=n_nz, replace=False) if n_nz else np.empty(0, dtype=np.int64)
    rest = rng.choice(flat.size, size=min(flat.size, n - n_nz + n), replace=False)
    rest = rest[~np.isin(rest, chosen)]
    # extra candidates sit at the back for replacing entries that straddle a kink
    return np.concatenate([chosen, rest]).astype(np.int64)


def finite_diff_check(
    loss_fn: LossFn,
    groups: Mapping[str, Mapping[str, Tensor]],
    step: float = 1e-5,
    tolerance: float = 1e-4,
    samples: int = 12,
    rng: np.random.Generator | None = None,
    abs_floor: float = 1e-6,
) -> GradCheckReport:
    """Compare tape gradients against central differences, per parameter group.

    ``loss_fn`` must rebuild the forward pass on every call. Entries whose
    +step and -step evaluations take different branches of a piecewise op
    (ReLU sign flips, clamps) are not smooth on the stencil and are replaced
    by other entries. Groups whose tensors all have ``requires_grad=False``
    are reported as frozen: their tape gradient must be exactly zero.
    """
    if step <= 0:
        raise ValueError("finite-difference step must be positive")
    rng = rng or np.random.default_rng(0)

    first, _ = _evaluate(loss_fn)
    second, _ = _evaluate(loss_fn)
    if first != second:
        raise OracleInvalidError(f"loss_fn is not deterministic: {first!r} != {second!r}")

    all_params = [p for g in groups.values() for p in g.values()]
    for p in all_params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    report = GradCheckReport(tolerance, step)
    for gname, params in groups.items():
        frozen = not any(p.requires_grad for p in params.values())
        check = GroupCheck(gname, frozen)
        report.groups[gname] = check
        for p in params.values():
            analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
            check.max_abs_grad = max(check.max_abs_grad, float(np.abs(analytic).max(initial=0.0)))
            if frozen or not p.requires_grad:
                continue
            done = 0
            for idx in _pick_entries(analytic, samples, rng):
                if done >= samples:
                    break
                orig = p.data
                try:
                    plus = orig.copy()
                    plus.flat[idx] += step
                    p.data = plus
                    f_plus, log_plus = _evaluate(loss_fn)
                    minus = orig.copy()
                    minus.flat[idx] -= step
                    p.data = minus
                    f_minus, log_minus = _evaluate(loss_fn)
                finally:
                    p.data = orig
                if log_plus != log_minus:
                    check.n_nonsmooth += 1
                    continue
                numeric = (f_plus - f_minus) / (2.0 * step)
                err = relative_error(float(analytic.flat[idx]), numeric, abs_floor)
                check.max_rel_err = max(check.max_rel_err, err)
                check.n_checked += 1
                done += 1
    for p in all_params:
        p.zero_grad()
    return report
