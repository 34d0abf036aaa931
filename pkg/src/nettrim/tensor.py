"""Dense numeric primitives shared by the solvers.

Matrices are plain ``numpy.ndarray`` objects of dtype float64; support masks
are boolean arrays of the same shape as the matrix they index.  Everything
here is a pure function of its inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

__all__ = [
    "FactorizationError",
    "SpdFactor",
    "as_matrix",
    "relu",
    "support",
    "masked_frobenius",
    "soft_threshold",
    "project_ball",
    "project_orthant",
    "spd_factorize",
    "spd_solve",
    "l1_norm",
    "frobenius",
    "nnz",
    "percent_zeros",
]


class FactorizationError(ValueError):
    """Raised when a matrix handed to :func:`spd_factorize` is not SPD."""


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    """Return `x` as a finite 2-D float64 array, raising on NaN/Inf."""
    a = np.asarray(x, dtype=np.float64)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite entries")
    return a


def _check_same_shape(*arrays):
    shape = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != shape:
            raise ValueError(f"shape mismatch: {shape} vs {a.shape}")


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def support(x: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Boolean mask of the entries strictly above `threshold`."""
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    return np.asarray(x) > threshold


def masked_frobenius(x: np.ndarray, mask: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_same_shape(x, mask)
    return float(np.sqrt(np.sum(x[mask] ** 2)))


def soft_threshold(x: np.ndarray, c) -> np.ndarray:
    """Entrywise shrinkage ``sign(x) * max(|x| - c, 0)``.

    This is the proximal map of ``c * ||.||_1``.  `c` may be an array that
    broadcasts against `x` (weighted l1).
    """
    if np.any(np.asarray(c) < 0):
        raise ValueError("threshold c must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.maximum(np.abs(x) - c, 0.0)


def project_ball(y: np.ndarray, z: np.ndarray, mask: np.ndarray, eps: float) -> np.ndarray:
    """Project ``y[mask]`` onto the Frobenius ball of radius `eps` around ``z[mask]``.

    Entries outside `mask` are returned as zero so the caller can compose the
    result with the complementary (orthant) block.  ``eps == 0`` collapses
    the ball to its center without dividing by a zero norm.
    """
    if eps < 0:
        raise ValueError("eps must be nonnegative")
    y = np.asarray(y, dtype=np.float64)
    z = np.asarray(z, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    _check_same_shape(y, z, mask)
    d = np.where(mask, y - z, 0.0)
    nd = float(np.sqrt(np.sum(d * d)))
    if nd > eps:
        d *= eps / nd
    return np.where(mask, z + d, 0.0)


def project_orthant(y: np.ndarray, v: np.ndarray, mask_c: np.ndarray) -> np.ndarray:
    """Clamp ``y`` to ``<= v`` on `mask_c`; zero elsewhere.

    Same as ``y - (y - v)^+`` restricted to the mask.
    """
    y = np.asarray(y, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    mask_c = np.asarray(mask_c, dtype=bool)
    _check_same_shape(y, v, mask_c)
    return np.where(mask_c, np.minimum(y, v), 0.0)


@dataclass(frozen=True)
class SpdFactor:
    """Lower Cholesky factor ``L`` with ``L @ L.T == C``."""

    factor: np.ndarray

    @property
    def dimension(self) -> int:
        return self.factor.shape[0]


def spd_factorize(c: np.ndarray, check_tol: float = 1e-10) -> SpdFactor:
    c = as_matrix(c, "C")
    if c.shape[0] != c.shape[1]:
        raise ValueError(f"C must be square, got {c.shape}")
    if not np.allclose(c, c.T, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(c).max(initial=0.0))):
        raise FactorizationError("C is not symmetric")
    try:
        low = scipy.linalg.cholesky(c, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"C is not positive definite: {exc}") from None
    if np.any(np.diag(low) <= 0):
        raise FactorizationError("nonpositive pivot in Cholesky factor")
    cn = np.linalg.norm(c)
    if cn > 0 and np.linalg.norm(low @ low.T - c) / cn > check_tol:
        raise FactorizationError("Cholesky reconstruction error above tolerance")
    return SpdFactor(low)


def spd_solve(f: SpdFactor, b: np.ndarray) -> np.ndarray:
    """Solve ``C X = B`` given the factor of ``C``; `b` may be a vector or matrix."""
    b = np.asarray(b, dtype=np.float64)
    if b.shape[0] != f.dimension:
        raise ValueError(f"rhs has {b.shape[0]} rows, factor has dimension {f.dimension}")
    return scipy.linalg.cho_solve((f.factor, True), b, check_finite=False)


def l1_norm(x: np.ndarray) -> float:
    return float(np.sum(np.abs(x)))


def frobenius(x: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(x, dtype=np.float64).ravel()))


def nnz(x: np.ndarray, tol: float = 0.0) -> int:
    if tol < 0:
        raise ValueError("tol must be nonnegative")
    return int(np.count_nonzero(np.abs(x) > tol))


def percent_zeros(x: np.ndarray, tol: float = 0.0) -> float:
    x = np.asarray(x)
    if x.size == 0:
        return 100.0
    return 100.0 * (x.size - nnz(x, tol)) / x.size
