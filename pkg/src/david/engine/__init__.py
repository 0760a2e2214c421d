from .tensor import Tensor, as_tensor, backward, is_grad_enabled, no_grad
from .functional import (
    add,
    bilinear_upsample2x,
    concat_channels,
    conv2d,
    conv_output_size,
    elementwise_mul,
    getitem,
    maxpool2x2,
    mean,
    mse,
    mul,
    relu,
    reshape,
    softmax_over_axis,
    stack,
    sub,
    sum_over_axis,
)
from .optim import AdamState, InitSpec, adam_step, xavier_init
