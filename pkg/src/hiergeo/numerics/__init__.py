"""Small numpy tensor engine with reverse-mode autodiff."""

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import check_gradients, numeric_grad, relative_error
from .nn import (
    AttentionWeights,
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    StackedFeedForward,
    attention,
    cross_attention,
    multi_head_self_attention,
)
from .ops import (
    add,
    concat,
    cross_entropy,
    div,
    exp,
    gelu,
    index,
    layer_norm,
    log,
    log_softmax,
    matmul,
    mean,
    mul,
    relu,
    reshape,
    softmax,
    sub,
    swapaxes,
    tanh,
)
from .ops import sum as tsum
from .optim import DEFAULT_MILESTONES, OptimizerState, sgd_step
from .tensor import (
    Parameter,
    ShapeError,
    Tensor,
    backward,
    get_default_dtype,
    is_grad_enabled,
    no_grad,
    set_default_dtype,
)
