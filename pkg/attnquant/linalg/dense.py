"""
Dense linear algebra kernels shared by all other modules.

Shape conventions
-----------------
DenseMatrix
    Two dimensional ``numpy.float64`` array, row-major (C order).
LowerTriangular
    Square ``numpy.float64`` array whose strict upper triangle is zero and whose diagonal is
    strictly positive.
Activations
    ``tokens × features``, for example the calibration input ``X`` is ``n × d_model``.
    The "2XXᵀ" Hessian of a ``features × tokens`` input therefore reads ``2 XᵀX`` here.
Weights
    Stored in product orientation ``X @ W``, that is ``in × out``.
    The quantizer operates on the transposed view ``Wᵀ`` (``out × in``), such that the columns
    are the input features and the Hessian has the input dimension.
"""

import logging

import numpy as np
import numpy.typing as npt
from scipy import linalg as sla
from scipy.linalg import lapack

from ..errors import DefinitenessError, NumericError, ShapeError


log = logging.getLogger(__name__)
log.addHandler(logging.NullHandler())


DenseMatrix = npt.NDArray[np.float64]
LowerTriangular = npt.NDArray[np.float64]

SYMMETRY_TOLERANCE = 1e-9


def as_matrix(value, name: str = "matrix") -> DenseMatrix:
    """Return `value` as a two dimensional float64 array."""
    array = np.asarray(value, dtype=np.float64)
    if array.ndim == 1:
        array = array.reshape(1, -1)
    if array.ndim != 2:
        raise ShapeError(f"The {name} has to be two dimensional, got shape {array.shape}.")
    return np.ascontiguousarray(array)


def check_finite(matrix: np.ndarray, name: str = "matrix") -> None:
    """Raise a :class:`NumericError`, if `matrix` contains NaN or Inf."""
    if not np.all(np.isfinite(matrix)):
        raise NumericError(f"The {name} contains non-finite values.")


def matmul(a: DenseMatrix, b: DenseMatrix) -> DenseMatrix:
    """Return the matrix product ``a · b``."""
    a = as_matrix(a, "left factor")
    b = as_matrix(b, "right factor")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Can not multiply {a.shape} by {b.shape}.")
    result = a @ b
    check_finite(result, "product")
    return result


def symmetrize(a: DenseMatrix) -> DenseMatrix:
    """Return ``(a + aᵀ) / 2`` after checking, that `a` is symmetric within tolerance."""
    a = as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise ShapeError(f"Matrix of shape {a.shape} is not square.")
    norm = np.linalg.norm(a)
    if norm > 0 and np.linalg.norm(a - a.T) > SYMMETRY_TOLERANCE * norm:
        raise ShapeError("Matrix is not symmetric.")
    return (a + a.T) / 2


def cholesky(a: DenseMatrix) -> LowerTriangular:
    """Return the lower Cholesky factor ``L`` with ``L·Lᵀ == a``.

    The input is symmetrized first.

    :raises DefinitenessError: naming the first pivot, which is not positive.
    """
    a = symmetrize(a)
    check_finite(a)
    factor, info = lapack.dpotrf(a, lower=1, clean=1)
    if info > 0:
        raise DefinitenessError(
            f"Matrix is not positive definite, pivot {info - 1} is not positive.", pivot=info - 1
        )
    elif info < 0:
        raise NumericError(f"Cholesky factorization got an illegal value at argument {-info}.")
    return np.ascontiguousarray(factor)


def invert_spd(a: DenseMatrix) -> DenseMatrix:
    """Invert a symmetric positive definite matrix via its Cholesky factor."""
    factor = cholesky(a)
    inverse = sla.cho_solve((factor, True), np.eye(factor.shape[0]))
    return (inverse + inverse.T) / 2


def softmax_rows(m: DenseMatrix) -> DenseMatrix:
    """Return the row-wise softmax of `m`, stabilized by subtracting the row maximum.

    Entries of ``-inf`` (masked positions) get probability zero, every row needs at least one
    finite entry.
    """
    m = as_matrix(m)
    if np.any(np.isnan(m)) or np.any(m == np.inf):
        raise NumericError("Softmax input contains NaN or +inf.")
    row_max = m.max(axis=1, keepdims=True)
    if not np.all(np.isfinite(row_max)):
        raise NumericError("Softmax input has a row without finite entries.")
    exponentials = np.exp(m - row_max)
    return exponentials / exponentials.sum(axis=1, keepdims=True)


def shifted_cholesky_probe(a: DenseMatrix, shift: float = 1e-8) -> bool:
    """Return whether ``a + shift·I`` is positive definite.

    Succeeds for every positive semidefinite `a`, fails if the smallest eigenvalue is below
    ``-shift``.
    """
    a = as_matrix(a)
    try:
        cholesky(a + shift * np.eye(a.shape[0]))
    except DefinitenessError:
        return False
    return True


def relative_frobenius(a: DenseMatrix, b: DenseMatrix) -> float:
    """Relative Frobenius distance ``‖a − b‖ / max(‖b‖, 1e-300)``."""
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))
