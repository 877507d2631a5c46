"""Symmetric eigendecomposition and PSD matrix square root."""
import numpy as np

try:
    from ._jacobi import jacobi_eigh as _jacobi_eigh
    BACKEND = "cython"
except ImportError:  # extension not built
    from ._jacobi_py import jacobi_eigh as _jacobi_eigh
    BACKEND = "python"

from .autodiff import Tensor

SYM_TOL = 1e-10
EIG_TOL = 1e-12
MAX_SWEEPS = 100
NEG_EIG_TOL = 1e-10


class ConvergenceError(RuntimeError):
    pass


def _as_array(a):
    return a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def sym_eig(a, tol=EIG_TOL, max_sweeps=MAX_SWEEPS):
    """Eigenvalues (ascending) and orthonormal eigenvectors of symmetric ``a``.

    Uses cyclic Jacobi rotations; converged when the off-diagonal Frobenius
    norm drops below ``tol`` times the norm of ``a``.
    """
    a = _as_array(a)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"sym_eig needs a square matrix, got {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("sym_eig: non-finite input")
    if np.max(np.abs(a - a.T), initial=0.0) > SYM_TOL:
        raise ValueError("sym_eig: matrix is not symmetric")
    a = 0.5 * (a + a.T)
    w, v, sweeps = _jacobi_eigh(a, tol, max_sweeps)
    if sweeps < 0:
        raise ConvergenceError(f"Jacobi did not converge in {max_sweeps} sweeps")
    order = np.argsort(w, kind="stable")
    return w[order], np.ascontiguousarray(v[:, order])


def sqrtm_psd(a):
    """Symmetric square root of a positive semi-definite matrix."""
    w, v = sym_eig(a)
    if w.size and w[0] < -NEG_EIG_TOL:
        raise ValueError(f"sqrtm_psd: negative eigenvalue {w[0]:.3e}")
    root = (v * np.sqrt(np.clip(w, 0.0, None))) @ v.T
    return 0.5 * (root + root.T)
