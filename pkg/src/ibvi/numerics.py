"""Dense linear-algebra kernels: SVD, row/null-space bases, projectors, PSD square roots."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

RANK_TOL = 1e-10
SYM_TOL = 1e-8


class NumericsError(ValueError):
    """Raised when a linear-algebra kernel cannot produce a valid result."""


def _as_matrix(a, name="A") -> np.ndarray:
    a = np.asarray(a, dtype=float)
    if a.ndim != 2:
        raise NumericsError(f"{name} must be a 2-D matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise NumericsError(f"{name} contains non-finite entries")
    return a


@dataclass(frozen=True)
class SubspaceBasis:
    """Orthonormal basis (columns of ``basis``) of a subspace of R^P.

    ``kind`` is ``"range"`` for range(X^T) or ``"null"`` for null(X).
    """

    basis: np.ndarray
    kind: str

    @property
    def ambient_dim(self) -> int:
        return self.basis.shape[0]

    @property
    def dim(self) -> int:
        return self.basis.shape[1]

    def coords(self, v: np.ndarray) -> np.ndarray:
        """Coordinates ``basis^T v`` of a vector (or the rows of a matrix's columns)."""
        return self.basis.T @ v


def svd(a, full: bool = False):
    """Singular value decomposition ``A = U diag(s) V^T``.

    Returns ``(U, s, V)`` with ``s`` descending and ``V`` holding right
    singular vectors as columns. With ``full=True`` both ``U`` and ``V`` are
    square.
    """
    a = _as_matrix(a)
    try:
        u, s, vt = np.linalg.svd(a, full_matrices=full)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"SVD did not converge: {exc}") from exc
    return u, s, vt.T


def numerical_rank(singular_values: np.ndarray, rank_tol: float = RANK_TOL) -> int:
    if singular_values.size == 0 or singular_values[0] == 0.0:
        return 0
    return int(np.sum(singular_values > rank_tol * singular_values[0]))


def row_space_bases(x, rank_tol: float = RANK_TOL) -> tuple[SubspaceBasis, SubspaceBasis]:
    """Orthonormal bases of range(X^T) and null(X) from the right singular vectors of X."""
    x = _as_matrix(x, "X")
    p = x.shape[1]
    if x.shape[0] == 0:
        return SubspaceBasis(np.zeros((p, 0)), "range"), SubspaceBasis(np.eye(p), "null")
    _, s, v = svd(x, full=True)
    k = numerical_rank(s, rank_tol)
    return SubspaceBasis(v[:, :k], "range"), SubspaceBasis(v[:, k:], "null")


def projector(b: SubspaceBasis) -> np.ndarray:
    """Orthogonal projector ``B B^T`` onto the span of the basis."""
    return b.basis @ b.basis.T


def symmetrize(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def psd_sqrt(a, sym_tol: float = SYM_TOL) -> np.ndarray:
    """Principal square root of a symmetric PSD matrix.

    Negative eigenvalues (round-off) are clamped to zero.

    Raises
    ------
    NumericsError
        If ``a`` is asymmetric beyond ``sym_tol`` (relative to its scale).
    """
    a = _as_matrix(a)
    if a.shape[0] != a.shape[1]:
        raise NumericsError(f"psd_sqrt needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    asym = float(np.max(np.abs(a - a.T))) if a.size else 0.0
    if asym > sym_tol * scale:
        raise NumericsError(f"matrix is not symmetric (max asymmetry {asym:.3e})")
    evals, evecs = np.linalg.eigh(symmetrize(a))
    root = np.sqrt(np.maximum(evals, 0.0))
    return symmetrize((evecs * root) @ evecs.T)


def pseudo_inverse_apply(x, y, rank_tol: float = RANK_TOL) -> np.ndarray:
    """Minimum-norm least-squares solution ``X^+ y`` (lies in range(X^T))."""
    x = _as_matrix(x, "X")
    y = np.asarray(y, dtype=float)
    u, s, v = svd(x)
    k = numerical_rank(s, rank_tol)
    coef = (u[:, :k].T @ y) / s[:k]
    return v[:, :k] @ coef


def lambda_max_sym(a: np.ndarray) -> float:
    """Largest eigenvalue of a symmetric matrix."""
    if a.size == 0:
        return 0.0
    return float(np.linalg.eigvalsh(symmetrize(a))[-1])


def gram_lambda_max(x: np.ndarray) -> float:
    """Largest eigenvalue of ``X^T X`` (squared top singular value)."""
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return 0.0
    return float(np.linalg.norm(x, 2) ** 2)
