"""The differentiable op set used by the model.

Feature maps are laid out H x W x C. There is deliberately no general
broadcasting: ``add`` wants equal shapes, ``add_bias`` adds a vector along the
last axis.
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, make_result, note_branch

SIGMOID_CLAMP = 40.0


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    A, B = a.data, b.data

    def backward(g, needs):
        return (g @ B.T if needs[0] else None, A.T @ g if needs[1] else None)

    return make_result(A @ B, (a, b), backward, "matmul")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return make_result(a.data + b.data, (a, b), lambda g, needs: (g, g), "add")


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    if bias.data.ndim != 1 or x.shape[-1] != bias.shape[0]:
        raise ShapeError(f"add_bias: bias {bias.shape} does not match {x.shape}")
    axes = tuple(range(x.data.ndim - 1))

    def backward(g, needs):
        return (g, g.sum(axis=axes) if needs[1] else None)

    return make_result(x.data + bias.data, (x, bias), backward, "add_bias")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return make_result(A * B, (a, b), lambda g, needs: (g * B, g * A), "mul")


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    return make_result(x.data * c, (x,), lambda g, needs: (g * c,), "scale")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    if not tensors:
        raise ShapeError("concat of nothing")
    ndim = tensors[0].data.ndim
    axis = axis % ndim
    for t in tensors[1:]:
        if t.data.ndim != ndim or any(
            t.shape[d] != tensors[0].shape[d] for d in range(ndim) if d != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    bounds = np.cumsum([0] + [t.shape[axis] for t in tensors])

    def backward(g, needs):
        out = []
        for i, need in enumerate(needs):
            if not need:
                out.append(None)
                continue
            idx = [slice(None)] * ndim
            idx[axis] = slice(bounds[i], bounds[i + 1])
            out.append(g[tuple(idx)])
        return out

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return make_result(data, tuple(tensors), backward, "concat")


def slice_(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    axis = axis % x.data.ndim
    n = x.shape[axis]
    if not 0 <= start <= stop <= n:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of length {n}")
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    shape = x.shape

    def backward(g, needs):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return make_result(x.data[idx].copy(), (x,), backward, "slice")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: {x.shape} -> {shape}")
    old = x.shape
    return make_result(x.data.reshape(shape), (x,), lambda g, needs: (g.reshape(old),), "reshape")


def total(x: Tensor) -> Tensor:
    shape = x.shape
    return make_result(
        np.array(x.data.sum()), (x,), lambda g, needs: (np.full(shape, float(g)),), "sum"
    )


def mean(x: Tensor) -> Tensor:
    return scale(total(x), 1.0 / x.size)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    note_branch(mask)
    return make_result(np.where(mask, x.data, 0.0), (x,), lambda g, needs: (g * mask,), "relu")


def sigmoid(x: Tensor) -> Tensor:
    """Logistic function with logits clamped to +-40; the clamp zeroes the gradient."""
    inside = np.abs(x.data) < SIGMOID_CLAMP
    note_branch(inside)
    z = np.clip(x.data, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    y = 1.0 / (1.0 + np.exp(-z))

    def backward(g, needs):
        return (g * y * (1.0 - y) * inside,)

    return make_result(y, (x,), backward, "sigmoid")


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last (channel) axis with max subtraction."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g, needs):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return make_result(y, (x,), backward, "softmax")


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, dilation: int = 1) -> Tensor:
    """Same-size 2D convolution (cross-correlation) with zero padding.

    ``x`` is H x W x C, ``kernel`` is k x k x C x C'. A 1x1 kernel is a
    per-pixel linear map.
    """
    if kernel.data.ndim != 4 or kernel.shape[0] != kernel.shape[1]:
        raise ShapeError(f"conv2d: kernel shape {kernel.shape} is not k x k x C x C'")
    k = kernel.shape[0]
    if k % 2 == 0:
        raise ConfigError(f"conv2d: kernel size {k} must be odd")
    if dilation < 1:
        raise ConfigError(f"conv2d: dilation {dilation} must be >= 1")
    if x.data.ndim != 3 or x.shape[2] != kernel.shape[2]:
        raise ShapeError(f"conv2d: input {x.shape} does not match kernel {kernel.shape}")
    if bias is not None and bias.shape != (kernel.shape[3],):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match kernel {kernel.shape}")
    if k == 1:
        return _pointwise(x, kernel, bias)
    H, W, C = x.shape
    Co = kernel.shape[3]
    K = kernel.data
    p = dilation * (k // 2)
    Wp = W + 2 * p
    # The padded map is flattened row-major with one spare row, so the input
    # seen by tap (i, j) is the contiguous run starting at i*d*Wp + j*d. Outputs
    # are computed on an H x Wp grid; the last 2p columns of each row are junk.
    xp = np.zeros(((H + 2 * p) * Wp + 2 * p, C))
    xp[: (H + 2 * p) * Wp].reshape(H + 2 * p, Wp, C)[p : p + H, p : p + W] = x.data
    n = H * Wp
    offsets = [(i, j, i * dilation * Wp + j * dilation) for i in range(k) for j in range(k)]
    out = np.zeros((n, Co))
    for i, j, off in offsets:
        out += xp[off : off + n] @ K[i, j]
    out = out.reshape(H, Wp, Co)[:, :W]
    if bias is not None:
        out = out + bias.data

    def backward(g, needs):
        gext = np.zeros((H, Wp, Co))
        gext[:, :W] = g
        gext = gext.reshape(n, Co)
        gx = gk = gb = None
        if needs[0]:
            gxp = np.zeros_like(xp)
            for i, j, off in offsets:
                gxp[off : off + n] += gext @ K[i, j].T
            gx = gxp[: (H + 2 * p) * Wp].reshape(H + 2 * p, Wp, C)[p : p + H, p : p + W].copy()
        if needs[1]:
            gk = np.empty_like(K)
            for i, j, off in offsets:
                gk[i, j] = xp[off : off + n].T @ gext
        if len(needs) > 2 and needs[2]:
            gb = g.reshape(-1, Co).sum(axis=0)
        return (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(np.ascontiguousarray(out), inputs, backward, "conv2d")


def _pointwise(x: Tensor, kernel: Tensor, bias: Tensor | None) -> Tensor:
    H, W, C = x.shape
    Co = kernel.shape[3]
    kmat = kernel.data.reshape(C, Co)
    cols = x.data.reshape(H * W, C)
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    kshape = kernel.shape

    def backward(g, needs):
        g2 = g.reshape(H * W, Co)
        gx = (g2 @ kmat.T).reshape(H, W, C) if needs[0] else None
        gk = (cols.T @ g2).reshape(kshape) if needs[1] else None
        gb = g2.sum(axis=0) if len(needs) > 2 and needs[2] else None
        return (gx, gk, gb)

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return make_result(out.reshape(H, W, Co), inputs, backward, "conv2d")
