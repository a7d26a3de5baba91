from .nn import MlpParams, geometric_init, kaiming_uniform_init, mlp_forward, positional_encode
from .optim import OptimState, PoisonedGradientError, optimizer_step
from .tensor import (
    DimensionError,
    NonFiniteError,
    Tape,
    Tensor,
    backward,
    concat,
    no_record,
    stack,
    where,
)
