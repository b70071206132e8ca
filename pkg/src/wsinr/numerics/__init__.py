"""Float64 tensors, a reverse-mode tape, optimizers and a gradient oracle."""

from .checkpoint import (
    adam_from_tensors,
    adam_to_tensors,
    ema_from_tensors,
    ema_to_tensors,
    load_checkpoint,
    save_checkpoint,
)
from .gradcheck import GradCheckReport, GroupCheck, finite_diff_check, relative_error
from .ops import (
    add,
    add_bias,
    concat,
    conv2d,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    softmax,
    total,
)
from .optim import AdamState, EmaState, adam_step, ema_swap, ema_update
from .tensor import Node, Tape, Tensor, active_tape, kink_monitor, make_result, no_tape, note_branch

__all__ = [name for name in dir() if not name.startswith("_")]
