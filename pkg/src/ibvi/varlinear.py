"""Closed-form expected losses and gradients for Gaussian variational linear models."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussian import ShapeError, VariationalParams
from .numerics import RANK_TOL, lambda_max_sym, numerical_rank

EXP_OVERFLOW = 700.0


class DivergenceError(FloatingPointError):
    """Raised when an exponential-loss exponent exceeds the overflow guard."""


@dataclass(frozen=True)
class RegressionProblem:
    """Linear-Gaussian regression ``y ~ N(X w, sigma2 I)``."""

    X: np.ndarray
    y: np.ndarray
    sigma2: float = 1.0

    def __post_init__(self):
        x = np.asarray(self.X, dtype=float)
        y = np.asarray(self.y, dtype=float).reshape(-1)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ShapeError(f"X must be N x P with N, P >= 1, got {x.shape}")
        if y.shape[0] != x.shape[0]:
            raise ShapeError(f"y has {y.shape[0]} entries for {x.shape[0]} rows")
        if not self.sigma2 > 0:
            raise ValueError("sigma2 must be positive")
        object.__setattr__(self, "X", x)
        object.__setattr__(self, "y", y)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @property
    def overparametrized(self) -> bool:
        s = np.linalg.svd(self.X, compute_uv=False)
        return self.p > self.n and numerical_rank(s, RANK_TOL) == self.n

    def subset(self, idx) -> RegressionProblem:
        return RegressionProblem(self.X[idx], self.y[idx], self.sigma2)


def interpolating_separator(x: np.ndarray) -> np.ndarray:
    """``w = X^T (X X^T)^{-1} 1``: interpolates all-ones margins when X has full row rank."""
    return x.T @ np.linalg.solve(x @ x.T, np.ones(x.shape[0]))


@dataclass(frozen=True)
class ClassificationProblem:
    """Binary classification with labels absorbed into the rows (``x_n := y_n x_n``).

    Construction verifies separability when the model is overparametrized
    with full row rank; other inputs are taken as certified by the caller.
    """

    X: np.ndarray
    loss_kind: str = "exponential"
    overparametrized: bool = field(init=False)

    def __post_init__(self):
        x = np.asarray(self.X, dtype=float)
        if x.ndim != 2 or x.shape[0] < 1 or x.shape[1] < 1:
            raise ShapeError(f"X must be N x P with N, P >= 1, got {x.shape}")
        if self.loss_kind != "exponential":
            raise ValueError(f"unsupported loss {self.loss_kind!r}; only 'exponential' is implemented")
        object.__setattr__(self, "X", x)
        n, p = x.shape
        s = np.linalg.svd(x, compute_uv=False)
        over = p > n and numerical_rank(s, RANK_TOL) == n
        object.__setattr__(self, "overparametrized", over)
        if over and not np.all(x @ interpolating_separator(x) > 0):
            raise ValueError("full-row-rank data failed the separability check")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    @classmethod
    def from_labels(cls, x, labels) -> ClassificationProblem:
        labels = np.asarray(labels, dtype=float).reshape(-1, 1)
        return cls(np.asarray(x, dtype=float) * labels)


def _check_theta(x: np.ndarray, theta: VariationalParams):
    if theta.dim != x.shape[1]:
        raise ShapeError(f"theta has dimension {theta.dim}, data has {x.shape[1]} features")


# -- regression ---------------------------------------------------------------


def expected_regression_loss(prob: RegressionProblem, theta: VariationalParams) -> float:
    """``(||y - X mu||^2 + tr(X S S^T X^T)) / (2 sigma2)``, the exact Gaussian expectation."""
    _check_theta(prob.X, theta)
    resid = prob.y - prob.X @ theta.mu
    xs = prob.X @ theta.factor
    return float((resid @ resid + np.sum(xs * xs)) / (2.0 * prob.sigma2))


def expected_regression_grad(prob: RegressionProblem, theta: VariationalParams):
    """Gradients ``(X^T (X mu - y), X^T X S) / sigma2``."""
    _check_theta(prob.X, theta)
    x = prob.X
    grad_mu = x.T @ (x @ theta.mu - prob.y) / prob.sigma2
    grad_factor = x.T @ (x @ theta.factor) / prob.sigma2
    return grad_mu, grad_factor


# -- exponential-loss classification -----------------------------------------


def _exp_terms(x: np.ndarray, theta: VariationalParams) -> np.ndarray:
    xs = x @ theta.factor
    exponent = -(x @ theta.mu) + 0.5 * np.sum(xs * xs, axis=1)
    worst = float(np.max(exponent))
    if worst > EXP_OVERFLOW:
        raise DivergenceError(f"exponential loss exponent {worst:.1f} exceeds {EXP_OVERFLOW:g}")
    return np.exp(exponent)


def expected_exponential_loss(prob: ClassificationProblem, theta: VariationalParams) -> float:
    """``sum_n exp(-x_n^T mu + x_n^T S S^T x_n / 2)`` (Gaussian moment generating function)."""
    _check_theta(prob.X, theta)
    return float(np.sum(_exp_terms(prob.X, theta)))


def expected_exponential_grad(prob: ClassificationProblem, theta: VariationalParams):
    """Gradients ``-X^T e`` and ``X^T diag(e) X S`` with ``e`` the per-point expected losses."""
    _check_theta(prob.X, theta)
    x = prob.X
    e = _exp_terms(x, theta)
    grad_mu = -(x.T @ e)
    grad_factor = x.T @ (e[:, None] * (x @ theta.factor))
    return grad_mu, grad_factor


def curvature_matrix(prob: ClassificationProblem, theta: VariationalParams) -> np.ndarray:
    e = _exp_terms(prob.X, theta)
    return prob.X.T @ (e[:, None] * prob.X)


def loss_curvature_bound(prob: ClassificationProblem, theta: VariationalParams) -> float:
    """Largest eigenvalue of ``A = sum_n e_n x_n x_n^T``; step sizes below ``1/lambda_max(A)`` keep ``||S||_F`` from growing."""
    _check_theta(prob.X, theta)
    return lambda_max_sym(curvature_matrix(prob, theta))


# -- training callbacks and per-sample losses ---------------------------------


def regression_loss_grad(prob: RegressionProblem):
    """``loss_grad`` callback for :func:`ibvi.optim.sgd_run` using the closed-form batch loss.

    The parameter noise is ignored: the expectation is exact.
    """
    x_all, y_all, s2 = prob.X, prob.y, prob.sigma2

    def loss_grad(theta, batch, noise):
        x, y = x_all[batch], y_all[batch]
        resid = x @ theta.mu - y
        xs = x @ theta.factor
        loss = (resid @ resid + np.sum(xs * xs)) / (2.0 * s2)
        return loss, (x.T @ resid / s2, x.T @ xs / s2)

    return loss_grad


def exponential_loss_grad(prob: ClassificationProblem):
    x_all = prob.X

    def loss_grad(theta, batch, noise):
        x = x_all[batch]
        e = _exp_terms(x, theta)
        return float(np.sum(e)), (-(x.T @ e), x.T @ (e[:, None] * (x @ theta.factor)))

    return loss_grad


def sampled_regression_losses(prob: RegressionProblem, theta: VariationalParams, batch, z) -> np.ndarray:
    """Per-point squared-error losses ``(y_n - x_n^T w)^2 / (2 sigma2)`` at ``w = mu + S z``."""
    w = theta.mu + theta.factor @ np.asarray(z, dtype=float)
    resid = prob.y[batch] - prob.X[batch] @ w
    return resid**2 / (2.0 * prob.sigma2)


def sampled_exponential_losses(prob: ClassificationProblem, theta: VariationalParams, batch, z) -> np.ndarray:
    w = theta.mu + theta.factor @ np.asarray(z, dtype=float)
    return np.exp(-(prob.X[batch] @ w))
