from dataclasses import dataclass

import numpy as np
import scipy.linalg

from IllusionLab.errors import (
    DegenerateInputError,
    DimensionMismatchError,
    NonFiniteError,
    NotOrthonormalError,
    NotPositiveDefiniteError,
    NotUnitVectorError,
    SvdConvergenceError,
)
from IllusionLab.tolerances import Tolerances

SVD_DRIVERS = ("gesdd", "gesvd")


def as_vector(x, name="vector"):
    """
    Coerce x into a finite 1-D float64 array
    :param x: anything numpy can read as a vector
    :param name: name used in error messages
    :return: the validated array
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionMismatchError(f"{name} must be 1-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


def as_matrix(x, name="matrix", allow_empty_cols=False):
    """
    Coerce x into a finite 2-D float64 array
    :param x: anything numpy can read as a matrix
    :param name: name used in error messages
    :param allow_empty_cols: accept a rows x 0 matrix (an empty basis)
    :return: the validated array
    """
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionMismatchError(f"{name} must be 2-D, got shape {arr.shape}")
    if arr.shape[0] < 1 or (arr.shape[1] < 1 and not allow_empty_cols):
        raise DimensionMismatchError(f"{name} has an empty dimension: {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name} has non-finite entries")
    return arr


def require_same_dim(a, b, names=("a", "b")):
    if a.shape[-1] != b.shape[-1]:
        raise DimensionMismatchError(f"{names[0]} has dimension {a.shape[-1]} but {names[1]} has {b.shape[-1]}")


def require_unit(v, name="v", tol=Tolerances.unit_norm):
    norm = float(np.linalg.norm(v))
    if abs(norm - 1.0) > tol:
        raise NotUnitVectorError(f"{name} must have unit norm, got {norm!r}")


def require_orthonormal(V, name="V", tol=Tolerances.orthonormal):
    gram_error = float(np.linalg.norm(V.T @ V - np.eye(V.shape[1])))
    if gram_error > tol:
        raise NotOrthonormalError(f"{name} columns are not orthonormal (‖VᵀV - I‖_F = {gram_error:.3e})")


@dataclass(frozen=True)
class SvdResult:
    U: np.ndarray
    singular_values: np.ndarray
    V: np.ndarray

    def rank(self, rank_tol=None):
        tol = default_rank_tol(self.singular_values, (self.U.shape[0], self.V.shape[0])) if rank_tol is None else rank_tol
        return int(np.sum(self.singular_values > tol))


def default_rank_tol(singular_values, shape):
    if len(singular_values) == 0:
        return 0.0
    return float(singular_values[0]) * max(shape) * Tolerances.rank_factor


def _factor(A, full_matrices):
    for driver in SVD_DRIVERS:
        try:
            return scipy.linalg.svd(A, full_matrices=full_matrices, lapack_driver=driver)
        except np.linalg.LinAlgError:
            continue
    raise SvdConvergenceError(A.shape, SVD_DRIVERS)


def svd(A):
    """
    Thin singular value decomposition A = U diag(s) Vᵀ
    :param A: finite matrix
    :return: SvdResult with r = min(m, n) singular triplets, largest first
    """
    A = as_matrix(A, "A")
    u, s, vh = _factor(A, full_matrices=False)
    return SvdResult(U=u, singular_values=s, V=vh.T)


def nullspace_basis(W, rank_tol=None):
    """
    Orthonormal basis of ker W
    :param W: finite matrix
    :param rank_tol: absolute singular value cutoff, default σ_max · max(m, n) · 1e-12
    :return: cols(W) x (cols(W) - rank) matrix, possibly with zero columns
    """
    W = as_matrix(W, "W")
    if rank_tol is None:
        rcond = max(W.shape) * Tolerances.rank_factor
    else:
        sigma_max = svd(W).singular_values[0]
        rcond = rank_tol / sigma_max if sigma_max > 0 else 0.0
    try:
        return scipy.linalg.null_space(W, rcond=rcond)
    except np.linalg.LinAlgError:
        # null_space only tries gesdd
        _, s, vh = _factor(W, full_matrices=True)
        tol = rcond * (s[0] if len(s) else 0.0)
        rank = int(np.sum(s > tol))
        return vh[rank:].T.copy()


def pseudoinverse(W, rank_tol=None):
    W = as_matrix(W, "W")
    rtol = max(W.shape) * Tolerances.rank_factor
    try:
        return scipy.linalg.pinv(W, atol=rank_tol if rank_tol is not None else 0.0, rtol=rtol)
    except np.linalg.LinAlgError:
        raise SvdConvergenceError(W.shape, SVD_DRIVERS[:1])


def kernel_projector(W, rank_tol=None):
    N = nullspace_basis(W, rank_tol)
    return N @ N.T


def decompose_against_kernel(v, W, rank_tol=None):
    """
    Split v into its part inside ker W and its part in the rowspace of W
    :param v: vector with dim(v) = cols(W)
    :param W: the reading matrix
    :param rank_tol: forwarded to nullspace_basis
    :return: (v_null, v_row)
    """
    v = as_vector(v, "v")
    W = as_matrix(W, "W")
    if W.shape[1] != v.shape[0]:
        raise DimensionMismatchError(f"v has dimension {v.shape[0]} but W has {W.shape[1]} columns")
    N = nullspace_basis(W, rank_tol)
    v_null = N @ (N.T @ v)
    return v_null, v - v_null


def uncentered_covariance(samples, ridge=None):
    """
    Σ = XᵀX / n + ridge·I over row activations
    :param samples: n x d matrix, one activation per row
    :param ridge: diagonal loading, default 1e-8 · trace(XᵀX / n) / d
    :return: symmetric d x d matrix
    """
    X = as_matrix(samples, "samples")
    n, d = X.shape
    sigma = X.T @ X / n
    sigma = (sigma + sigma.T) / 2
    if ridge is None:
        ridge = Tolerances.covariance_ridge * float(np.trace(sigma)) / d
    if ridge < 0:
        raise ValueError(f"ridge must be non-negative, got {ridge}")
    return sigma + ridge * np.eye(d)


def solve_spd(A, rhs):
    """
    Solve A x = rhs for symmetric positive definite A through a Cholesky factorization
    :param A: SPD matrix
    :param rhs: vector, or matrix of right-hand-side columns
    :return: x with the shape of rhs
    """
    A = as_matrix(A, "A")
    rhs = np.asarray(rhs, dtype=np.float64)
    if A.shape[0] != A.shape[1]:
        raise DimensionMismatchError(f"A must be square, got {A.shape}")
    if rhs.shape[0] != A.shape[0]:
        raise DimensionMismatchError(f"rhs has {rhs.shape[0]} rows but A is {A.shape[0]}x{A.shape[1]}")
    if not np.all(np.isfinite(rhs)):
        raise NonFiniteError("rhs has non-finite entries")
    asymmetry = float(np.linalg.norm(A - A.T))
    if asymmetry > Tolerances.symmetric * max(1.0, float(np.linalg.norm(A))):
        raise NotPositiveDefiniteError(f"matrix is not symmetric (‖A - Aᵀ‖_F = {asymmetry:.3e})")
    try:
        factor = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as e:
        raise NotPositiveDefiniteError(f"Cholesky factorization failed: {e}") from e
    return scipy.linalg.cho_solve(factor, rhs, check_finite=False)


def orthonormalize(M):
    """Thin QR retraction with R's diagonal made positive so the result is continuous in M."""
    q, r = np.linalg.qr(M)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return q * signs


def unit(v, name="v"):
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise DegenerateInputError(f"{name} is the zero vector and has no direction")
    return v / norm
