"""Small dense linear algebra and numerical differentiation helpers.

Matrices are plain ``numpy`` float64 arrays. LU factorization is delegated
to LAPACK (``getrf``/``gecon`` through scipy) behind a thin wrapper that
adds the singularity policy used throughout the package.
"""

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgWarning, lapack, lu_factor as _lu_factor, lu_solve as _lu_solve

from .errors import DimensionMismatch, NonFiniteEvaluation, SingularMatrix

# A pivot smaller than this fraction of the largest entry is treated as zero.
SINGULAR_RTOL = 1e-13


@dataclass(frozen=True)
class LuFactorization:
    """Partial-pivoting LU factors of a square matrix.

    Attributes
    ----------
    lu : ndarray
        Packed unit-lower ``L`` and upper ``U`` factors.
    piv : ndarray
        LAPACK pivot indices (row ``i`` was swapped with ``piv[i]``).
    sign : float
        Sign of the row permutation, +1 or -1.
    rcond : float
        1-norm reciprocal condition number estimate.
    """

    lu: np.ndarray
    piv: np.ndarray
    sign: float
    rcond: float

    @property
    def n(self):
        return self.lu.shape[0]

    def permutation(self):
        """Row order ``perm`` such that ``a[perm] = L @ U``."""
        perm = np.arange(self.n)
        for i, p in enumerate(self.piv):
            perm[i], perm[p] = perm[p], perm[i]
        return perm

    def factors(self):
        lower = np.tril(self.lu, -1) + np.eye(self.n)
        upper = np.triu(self.lu)
        return lower, upper


def as_matrix(a, name="matrix"):
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise DimensionMismatch(f"{name} must be two-dimensional, got shape {a.shape}")
    return a


def lu_factor(a):
    """Factor a square matrix, raising ``SingularMatrix`` on tiny pivots."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"LU needs a square matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NonFiniteEvaluation("matrix has non-finite entries")
    n = a.shape[0]
    scale = np.max(np.abs(a)) if a.size else 0.0
    if scale == 0.0:
        raise SingularMatrix("zero matrix", rcond=0.0)
    with warnings.catch_warnings():
        # exact zero pivots are reported through SingularMatrix below
        warnings.simplefilter("ignore", LinAlgWarning)
        lu, piv = _lu_factor(a, check_finite=False)
    pivots = np.abs(np.diag(lu))
    anorm = np.max(np.sum(np.abs(a), axis=0))
    rcond, info = lapack.dgecon(lu, anorm, norm="1")
    rcond = float(rcond) if info == 0 else 0.0
    if np.min(pivots) < SINGULAR_RTOL * scale:
        raise SingularMatrix(rcond=rcond)
    sign = -1.0 if np.count_nonzero(piv != np.arange(n)) % 2 else 1.0
    return LuFactorization(lu=lu, piv=piv, sign=sign, rcond=rcond)


def solve(fac, b):
    """Solve ``a x = b`` for a vector or matrix right-hand side."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != fac.n:
        raise DimensionMismatch(f"right-hand side has {b.shape[0]} rows, expected {fac.n}")
    return _lu_solve((fac.lu, fac.piv), b, check_finite=False)


def solve_transposed(fac, b):
    """Solve ``a.T x = b`` reusing the factors of ``a``."""
    b = np.asarray(b, dtype=float)
    if b.shape[0] != fac.n:
        raise DimensionMismatch(f"right-hand side has {b.shape[0]} rows, expected {fac.n}")
    return _lu_solve((fac.lu, fac.piv), b, trans=1, check_finite=False)


def trace_of_product(a, b):
    """``trace(a @ b)`` without forming the product."""
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape != b.T.shape or a.shape[0] != a.shape[1]:
        raise DimensionMismatch(f"cannot take trace of product of {a.shape} and {b.shape}")
    return float(np.einsum("st,ts->", a, b))


def log_abs_det(fac):
    pivots = np.abs(np.diag(fac.lu))
    if np.any(pivots == 0.0):
        raise SingularMatrix(rcond=fac.rcond)
    return float(np.sum(np.log(pivots)))


def default_steps(theta):
    theta = np.asarray(theta, dtype=float)
    return np.cbrt(np.finfo(float).eps) * np.maximum(1.0, np.abs(theta))


def finite_diff_jacobian(f, theta, h=None):
    """Central-difference Jacobian of a vector function.

    Row ``r`` holds the derivatives of ``f(theta)[r]``. A scalar-valued ``f``
    gives a single row.
    """
    theta = np.asarray(theta, dtype=float).ravel()
    steps = default_steps(theta) if h is None else np.broadcast_to(np.asarray(h, float), theta.shape)
    f0 = np.atleast_1d(np.asarray(f(theta), dtype=float))
    if not np.all(np.isfinite(f0)):
        raise NonFiniteEvaluation("function is non-finite at theta")
    jac = np.empty((f0.size, theta.size))
    for s in range(theta.size):
        up = theta.copy()
        down = theta.copy()
        up[s] += steps[s]
        down[s] -= steps[s]
        fu = np.atleast_1d(np.asarray(f(up), dtype=float)).ravel()
        fd = np.atleast_1d(np.asarray(f(down), dtype=float)).ravel()
        if not (np.all(np.isfinite(fu)) and np.all(np.isfinite(fd))):
            raise NonFiniteEvaluation(f"non-finite evaluation while perturbing coordinate {s}")
        jac[:, s] = (fu - fd) / (up[s] - down[s])
    return jac


def finite_diff_hessian(f, theta, h=None):
    """Hessian of a scalar function by central differences of a central-difference gradient."""
    theta = np.asarray(theta, dtype=float).ravel()
    if h is None:
        h = np.finfo(float).eps ** 0.25 * np.maximum(1.0, np.abs(theta))

    def grad(t):
        return finite_diff_jacobian(f, t, h)[0]

    hess = finite_diff_jacobian(grad, theta, h)
    return 0.5 * (hess + hess.T)
