"""Dense tensors, reverse-mode differentiation and numerical oracles."""
from .conv import (
    adaptive_avg_pool2d,
    broadcast_spatial,
    conv2d,
    conv_output_size,
    conv_transpose2d,
    maxpool2d,
    upsample_nearest,
)
from .gradcheck import GradCheckError, grad_check, numerical_grad
from .ops import (
    DTypeError,
    ShapeError,
    add,
    clip,
    concat,
    div,
    exp,
    getitem,
    log,
    matmul,
    mean,
    mul,
    pad_axis,
    power,
    relu,
    reshape,
    scale,
    sigmoid,
    softmax,
    sqrt,
    standardize,
    sub,
    sum,
    tanh,
    transpose,
)
from .rng import Rng
from .serialize import FormatError, load_array, read_array, save_array, write_array
from .tensor import NonFiniteError, Tape, TapeError, Tensor, active_tape, as_tensor


def backward(loss: Tensor) -> None:
    """Run reverse mode from the scalar ``loss`` over the tape that produced it."""
    loss.backward()
