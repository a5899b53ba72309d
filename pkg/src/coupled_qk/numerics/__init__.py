from .gradcheck import finite_diff_grad, jacobian_of, relative_error
from .linalg import SingularMatrixError, det, lu_factor, singular_values, slogdet
from .rng import Rng, stream_id
from .tensor import (
    NonFiniteError,
    Tensor,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    embedding,
    exp,
    log,
    matmul,
    mean,
    no_grad,
    repeat,
    reshape,
    rotate_pairs,
    rsqrt,
    sigmoid,
    silu,
    softmax,
    sqrt,
    swap_last,
    tensor,
    transpose,
    tsum,
)


def rng_normal(rng: Rng, shape, mean: float = 0.0, std: float = 1.0) -> Tensor:
    return rng.normal(shape, mean, std)


def rng_uniform_int(rng: Rng, lo: int, hi: int) -> int:
    return rng.uniform_int(lo, hi)
