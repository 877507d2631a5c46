import numpy as np

from .autodiff import Tape, Tensor

FD_STEP = 1e-5


def numeric_grad(fn, arrays, index, step=FD_STEP):
    """Central finite-difference gradient of scalar ``fn(*arrays)`` w.r.t. ``arrays[index]``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    x = base[index]
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = float(fn(*[Tensor(a) for a in base]).data)
        flat[i] = orig - step
        down = float(fn(*[Tensor(a) for a in base]).data)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * step)
    return g


def analytic_grad(fn, arrays):
    params = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = fn(*params)
    return tape.backward(loss, params)


def rel_error(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_grad(fn, arrays, step=FD_STEP):
    """Worst relative error between tape gradients and central differences."""
    analytic = analytic_grad(fn, arrays)
    return max(rel_error(analytic[i], numeric_grad(fn, arrays, i, step))
               for i in range(len(arrays)))
