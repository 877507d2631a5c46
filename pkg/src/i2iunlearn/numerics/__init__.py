from .autodiff import (
    OPS, NonFiniteError, ShapeError, Tape, Tensor, add, forward_op, l2_distance,
    l2_normalize, matmul, mean, mse, relu, scale, softmax_xent, sub,
)
from .gradcheck import check_grad
from .linalg import BACKEND, ConvergenceError, sqrtm_psd, sym_eig
from .rng import Rng, derive_seed, sample_gaussian, sample_uniform


def backward(tape, loss, params):
    return tape.backward(loss, params)
