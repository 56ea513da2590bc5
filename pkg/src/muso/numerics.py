"""Dense linear-algebra kernels: Gram blocks, Schur-complement inversion,
orthogonal projectors and truncated SVD.

Every inversion goes through a Cholesky factorization of a symmetric
positive (semi-)definite matrix.  A failed or numerically degenerate
factorization is reported as :class:`SingularMatrixError`.
"""

from dataclasses import dataclass

import numpy as np
from scipy import linalg


class SingularMatrixError(np.linalg.LinAlgError):
    """Raised when an SPD factorization fails or is numerically rank deficient."""


# pivot^2 / max(diag) below this (times n) is treated as singular
_PIVOT_RTOL = 1e3 * np.finfo(float).eps


def spd_factor(A, lam=0.0, what="matrix"):
    """Cholesky-factor ``A + lam*I``.

    Returns a ``(c, lower)`` pair usable with :func:`scipy.linalg.cho_solve`.
    """
    A = np.asarray(A, dtype=float)
    n = A.shape[0]
    if A.ndim != 2 or A.shape[1] != n:
        raise ValueError(f"{what} must be square, got shape {A.shape}")
    if lam < 0:
        raise ValueError(f"ridge lambda must be nonnegative, got {lam}")
    A = A + lam * np.eye(n) if lam else A.copy()
    scale = np.max(np.abs(np.diag(A))) if n else 0.0
    if n == 0 or scale == 0.0:
        raise SingularMatrixError(f"{what} is singular (zero matrix)")
    try:
        c, lower = linalg.cho_factor(A, lower=True, check_finite=True)
    except linalg.LinAlgError as exc:
        raise SingularMatrixError(f"{what} is singular or not positive definite: {exc}") from None
    pivots = np.diag(c) ** 2
    if pivots.min() <= n * _PIVOT_RTOL * scale:
        raise SingularMatrixError(
            f"{what} is numerically singular (pivot ratio {pivots.min() / scale:.3e})"
        )
    return c, lower


def spd_solve(A, B, lam=0.0, what="matrix"):
    """Solve ``(A + lam*I) X = B`` for symmetric positive definite ``A``."""
    return linalg.cho_solve(spd_factor(A, lam, what), np.asarray(B, dtype=float))


def spd_inverse(A, lam=0.0, what="matrix"):
    n = np.asarray(A).shape[0]
    inv = spd_solve(A, np.eye(n), lam, what)
    return 0.5 * (inv + inv.T)


def _check_features(Z, name):
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2:
        raise ValueError(f"{name} must be a 2-D feature matrix (D x N), got shape {Z.shape}")
    return Z


@dataclass(frozen=True)
class GramBlocks:
    """Blocks of ``K_aa = [Z_r Z_u]^T [Z_r Z_u]``."""

    K_rr: np.ndarray
    K_ru: np.ndarray
    K_ur: np.ndarray
    K_uu: np.ndarray

    def assemble(self):
        return np.block([[self.K_rr, self.K_ru], [self.K_ur, self.K_uu]])


def gram_blocks(Z_r, Z_u):
    Z_r = _check_features(Z_r, "Z_r")
    Z_u = _check_features(Z_u, "Z_u")
    if Z_r.shape[0] != Z_u.shape[0]:
        raise ValueError(
            f"Z_r and Z_u must share the feature dimension, got {Z_r.shape[0]} and {Z_u.shape[0]}"
        )
    K_ru = Z_r.T @ Z_u
    return GramBlocks(K_rr=Z_r.T @ Z_r, K_ru=K_ru, K_ur=K_ru.T.copy(), K_uu=Z_u.T @ Z_u)


@dataclass(frozen=True)
class SchurInverse:
    """Block inverse of ``K_aa + lam*I`` via the Schur complement of ``K_rr``.

    ``coupling`` holds ``(K_rr + lam*I)^{-1} K_ru``, which several callers
    need and is otherwise recomputed.
    """

    top_left: np.ndarray
    top_right: np.ndarray
    bottom_left: np.ndarray
    bottom_right: np.ndarray
    M: np.ndarray
    coupling: np.ndarray
    lam: float = 0.0

    def assemble(self):
        return np.block([[self.top_left, self.top_right], [self.bottom_left, self.bottom_right]])


def schur_block_inverse(g, lam=0.0):
    """Invert ``K_aa + lam*I`` block-wise.

    Raises :class:`SingularMatrixError` naming ``K_rr`` or the Schur
    complement when the corresponding factorization fails.
    """
    n_r = g.K_rr.shape[0]
    n_u = g.K_uu.shape[0]
    krr_factor = spd_factor(g.K_rr, lam, "K_rr (retain Gram block)")
    krr_inv = linalg.cho_solve(krr_factor, np.eye(n_r))
    krr_inv = 0.5 * (krr_inv + krr_inv.T)
    coupling = linalg.cho_solve(krr_factor, g.K_ru)
    schur = g.K_uu - g.K_ur @ coupling
    schur = 0.5 * (schur + schur.T)
    M = spd_inverse(schur, lam, "Schur complement K_uu - K_ur K_rr^-1 K_ru")
    top_right = -coupling @ M
    top_left = krr_inv + coupling @ M @ coupling.T
    return SchurInverse(
        top_left=0.5 * (top_left + top_left.T),
        top_right=top_right,
        bottom_left=top_right.T.copy(),
        bottom_right=M,
        M=M,
        coupling=coupling,
        lam=float(lam),
    )


@dataclass(frozen=True)
class ProjectorOperator:
    """Factored projector ``v -> basis @ inner @ basis.T @ v``.

    The D x D matrix is never formed unless :meth:`dense` is called.
    """

    basis: np.ndarray
    inner: np.ndarray
    lam: float
    mode: str

    @property
    def dim(self):
        return self.basis.shape[0]

    def apply(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.dim:
            raise ValueError(f"vector leading dimension {v.shape[0]} does not match projector dim {self.dim}")
        return self.basis @ (self.inner @ (self.basis.T @ v))

    __call__ = apply

    def __matmul__(self, v):
        return self.apply(v)

    def complement(self, v):
        """Apply ``I - P``."""
        return np.asarray(v, dtype=float) - self.apply(v)

    def dense(self):
        return self.apply(np.eye(self.dim))


def projector_exact(Z_s, lam=0.0):
    Z_s = _check_features(Z_s, "Z_s")
    if Z_s.shape[0] < 1 or Z_s.shape[1] < 1:
        raise ValueError(f"projector basis must be nonempty, got shape {Z_s.shape}")
    inner = spd_inverse(Z_s.T @ Z_s, lam, "projector Gram Z_s^T Z_s")
    return ProjectorOperator(basis=Z_s, inner=inner, lam=float(lam), mode="exact")


def projector_woodbury(Z_s, lam):
    """Regularized projector through the Woodbury identity.

    Only the D x D matrix ``lam*I_D + Z_s Z_s^T`` is factorized.
    """
    Z_s = _check_features(Z_s, "Z_s")
    if not lam > 0:
        raise ValueError(f"Woodbury projector requires lambda > 0, got {lam}")
    D, n_s = Z_s.shape
    gram_d = Z_s @ Z_s.T
    factor = spd_factor(0.5 * (gram_d + gram_d.T), lam, "lam*I_D + Z_s Z_s^T")
    inner = (np.eye(n_s) - Z_s.T @ linalg.cho_solve(factor, Z_s)) / lam
    inner = 0.5 * (inner + inner.T)
    return ProjectorOperator(basis=Z_s, inner=inner, lam=float(lam), mode="woodbury")


def truncated_svd(X, k):
    """Top-``k`` right singular vectors of ``X`` as a ``k x N`` array.

    Each row's first nonzero entry is made positive so the result is
    deterministic.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"X must be 2-D, got shape {X.shape}")
    k_max = min(X.shape)
    if not (isinstance(k, (int, np.integer)) and 1 <= k <= k_max):
        raise ValueError(f"k must be an integer in [1, {k_max}], got {k}")
    _, _, vt = np.linalg.svd(X, full_matrices=False)
    V = vt[:k].copy()
    for row in V:
        nz = np.flatnonzero(np.abs(row) > 1e-12 * np.abs(row).max())
        if nz.size and row[nz[0]] < 0:
            row *= -1.0
    return V
