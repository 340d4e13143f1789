from .core import (
    ComputationRecord,
    Function,
    Tensor,
    add,
    as_tensor,
    clip,
    concat,
    div,
    exp,
    is_grad_enabled,
    linear,
    log,
    matmul,
    maximum,
    mean,
    minimum,
    mul,
    no_grad,
    relu,
    reshape,
    sigmoid,
    softplus,
    sqrt,
    sub,
    transpose,
    tsum,
)
from .functional import (
    bce_with_logits,
    bilinear_crop_resize,
    conv2d,
    group_norm,
    l2_normalize,
    log_sum_exp,
    roi_align,
    sigmoid_focal_loss,
    upsample_nearest2x,
)
from .gradcheck import GradCheckError, grad_check
from .serialize import dumps_params, load_params, loads_params, save_params
