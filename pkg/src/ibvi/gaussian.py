"""Gaussians with factored covariance ``Sigma = S S^T`` and the divergences between them."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import NumericsError, SubspaceBasis, psd_sqrt

DECOMPOSITION_TOL = 1e-8


class ShapeError(ValueError):
    pass


@dataclass(frozen=True)
class VariationalParams:
    """Optimization variable ``theta = (mu, S)`` of a Gaussian variational family."""

    mu: np.ndarray
    factor: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=float)
        factor = np.asarray(self.factor, dtype=float)
        if mu.ndim != 1:
            raise ShapeError(f"mu must be a vector, got shape {mu.shape}")
        if factor.ndim != 2 or factor.shape[0] != mu.shape[0]:
            raise ShapeError(f"factor must be P x R with P={mu.shape[0]}, got {factor.shape}")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "factor", factor)

    @property
    def dim(self) -> int:
        return self.mu.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    def as_arrays(self) -> list[np.ndarray]:
        return [self.mu, self.factor]

    def with_arrays(self, arrays) -> VariationalParams:
        mu, factor = arrays
        return VariationalParams(mu, factor)

    def gaussian(self) -> Gaussian:
        return Gaussian(self.mu, self.factor)

    def copy(self) -> VariationalParams:
        return VariationalParams(self.mu.copy(), self.factor.copy())


@dataclass(frozen=True)
class Gaussian:
    """``N(mean, factor @ factor.T)``; a zero-column factor is a point mass."""

    mean: np.ndarray
    factor: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        factor = np.asarray(self.factor, dtype=float)
        if factor.ndim == 1:
            factor = factor.reshape(-1, 1)
        if mean.ndim != 1 or mean.shape[0] < 1:
            raise ShapeError(f"mean must be a non-empty vector, got shape {mean.shape}")
        if factor.ndim != 2 or factor.shape[0] != mean.shape[0]:
            raise ShapeError(f"factor must be P x R with P={mean.shape[0]}, got {factor.shape}")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "factor", factor)

    @classmethod
    def isotropic(cls, mean, scale: float) -> Gaussian:
        mean = np.asarray(mean, dtype=float)
        return cls(mean, scale * np.eye(mean.shape[0]))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def rank(self) -> int:
        return self.factor.shape[1]

    @property
    def cov(self) -> np.ndarray:
        return self.factor @ self.factor.T

    def params(self) -> VariationalParams:
        return VariationalParams(self.mean, self.factor)


def sample(q: Gaussian, noise) -> np.ndarray:
    """Reparametrized draw ``mu + S z``.

    ``noise`` is a length-R standard-normal vector, or an (M, R) array giving
    M draws at once (returned as an (M, P) array).
    """
    z = np.asarray(noise, dtype=float)
    if z.shape[-1] != q.rank:
        raise ShapeError(f"noise has length {z.shape[-1]}, factor rank is {q.rank}")
    if z.ndim == 1:
        return q.mean + q.factor @ z
    return q.mean + z @ q.factor.T


def _check_same_dim(q: Gaussian, p: Gaussian):
    if q.dim != p.dim:
        raise ShapeError(f"dimension mismatch: {q.dim} vs {p.dim}")


def w2_squared(q: Gaussian, p: Gaussian) -> float:
    """Squared 2-Wasserstein (Bures) distance between two Gaussians.

    ``||mu_q - mu_p||^2 + tr(Sq + Sp - 2 (Sq^1/2 Sp Sq^1/2)^1/2)``

    The cross term is evaluated as the nuclear norm ``||S_q^T S_p||_*``, which
    equals ``tr((Sq^1/2 Sp Sq^1/2)^1/2)`` for ``Sq = S_q S_q^T`` and
    ``Sp = S_p S_p^T``. Unlike an eigendecomposition-based square root this
    stays accurate to round-off when either covariance is rank deficient.
    """
    _check_same_dim(q, p)
    if q.rank and p.rank:
        cross = float(np.linalg.svd(q.factor.T @ p.factor, compute_uv=False).sum())
    else:
        cross = 0.0
    bures = float(np.sum(q.factor**2) + np.sum(p.factor**2)) - 2.0 * cross
    mean_term = float(np.sum((q.mean - p.mean) ** 2))
    return mean_term + max(bures, 0.0)


def w2_squared_sqrtm(q: Gaussian, p: Gaussian) -> float:
    """Reference evaluation of :func:`w2_squared` through explicit PSD square roots.

    Loses about ``sqrt(eps)`` relative accuracy when a covariance is singular.
    """
    _check_same_dim(q, p)
    cov_q, cov_p = q.cov, p.cov
    root_q = psd_sqrt(cov_q)
    cross = psd_sqrt(root_q @ cov_p @ root_q)
    bures = np.trace(cov_q) + np.trace(cov_p) - 2.0 * np.trace(cross)
    return float(np.sum((q.mean - p.mean) ** 2)) + max(float(bures), 0.0)


def project(q: Gaussian, basis: SubspaceBasis) -> Gaussian:
    """Pushforward of ``q`` under ``w -> V^T w`` for an orthonormal basis ``V``."""
    v = basis.basis
    return Gaussian(v.T @ q.mean, v.T @ q.factor)


def w2_squared_decomposed(
    q: Gaussian, p: Gaussian, range_basis: SubspaceBasis, null_basis: SubspaceBasis
) -> tuple[float, float]:
    """Split W2^2(q, p) into the range-space mean term and the null-block W2^2.

    Valid when q carries no variance along ``range_basis``. The sum of the two
    returned terms differs from :func:`w2_squared` by a constant that depends
    only on ``p`` and the bases.

    Raises
    ------
    NumericsError
        If ``V_A^T Sigma_q V_A`` is not (numerically) zero.
    """
    _check_same_dim(q, p)
    va = range_basis.basis
    block = va.T @ q.factor
    block_norm = float(np.sum(block**2))
    if block_norm > DECOMPOSITION_TOL:
        raise NumericsError(
            f"covariance of q is not zero on the range block: tr(V_A^T Sigma V_A) = {block_norm:.3e}"
        )
    mean_range_term = float(np.sum((va.T @ (q.mean - p.mean)) ** 2))
    if null_basis.dim == 0:
        return mean_range_term, 0.0
    null_block = w2_squared(project(q, null_basis), project(p, null_basis))
    return mean_range_term, null_block


def _full_rank_cholesky(g: Gaussian, name: str) -> np.ndarray:
    try:
        chol = np.linalg.cholesky(g.cov)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"{name} covariance is singular; KL divergence is infinite") from exc
    d = np.diag(chol)
    if d.min() <= 1e-12 * max(d.max(), 1.0):
        raise NumericsError(f"{name} covariance is singular; KL divergence is infinite")
    return chol


def kl_divergence(q: Gaussian, p: Gaussian) -> float:
    """KL(q || p) for full-rank Gaussians."""
    _check_same_dim(q, p)
    lq = _full_rank_cholesky(q, "q")
    lp = _full_rank_cholesky(p, "p")
    # Sigma_p^{-1} Sigma_q via triangular solves: ||L_p^{-1} L_q||_F^2 = tr(Sp^{-1} Sq)
    m = np.linalg.solve(lp, lq)
    delta = np.linalg.solve(lp, p.mean - q.mean)
    logdet_p = 2.0 * np.sum(np.log(np.diag(lp)))
    logdet_q = 2.0 * np.sum(np.log(np.diag(lq)))
    kl = 0.5 * (np.sum(m**2) + np.sum(delta**2) - q.dim + logdet_p - logdet_q)
    return float(kl)


def predictive_variance(q: Gaussian, x) -> float | np.ndarray:
    """Variance of ``x^T w`` under ``w ~ q``, i.e. ``||S^T x||^2``.

    Accepts a single input vector or an (N, P) matrix of inputs.
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != q.dim:
        raise ShapeError(f"input has dimension {x.shape[-1]}, expected {q.dim}")
    proj = x @ q.factor
    if x.ndim == 1:
        return float(proj @ proj)
    return np.sum(proj**2, axis=-1)
