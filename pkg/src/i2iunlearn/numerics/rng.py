import hashlib

import numpy as np

from .autodiff import Tensor


class Rng:
    """Seeded PCG64 stream; the same seed always yields the same samples."""

    def __init__(self, seed):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def spawn(self, name):
        return Rng(derive_seed(self.seed, name))


def derive_seed(master, name):
    digest = hashlib.sha256(f"{int(master)}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def sample_gaussian(rng, shape, sigma=None):
    """I.i.d. ``N(0, sigma)`` samples.

    ``sigma`` may be None / "identity", a scalar variance, a vector holding
    the diagonal, or a diagonal matrix. Full covariances are rejected.
    """
    shape = tuple(shape)
    z = rng.gen.standard_normal(shape)
    if sigma is None or (isinstance(sigma, str) and sigma == "identity"):
        return Tensor(z)
    var = np.asarray(sigma, dtype=np.float64)
    if var.ndim == 2:
        if var.shape[0] != var.shape[1] or np.any(var[~np.eye(len(var), dtype=bool)] != 0):
            raise ValueError("only diagonal covariances are supported")
        var = np.diag(var)
    if np.any(var < 0):
        raise ValueError("variances must be non-negative")
    if var.ndim == 1 and var.shape[0] != shape[-1]:
        raise ValueError(f"diagonal of length {var.shape[0]} vs last dim {shape[-1]}")
    return Tensor(z * np.sqrt(var))


def sample_uniform(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.gen.uniform(low, high, tuple(shape)))
