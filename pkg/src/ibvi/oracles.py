"""Closed-form ground truth for the implicit-bias characterizations.

Regression: the W2-closest zero-loss Gaussian and the per-member ensemble limit.
Classification: the hard-margin SVM, the feasible-set minimizer and the
log-rate offset vector ``w_tilde``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog, nnls

from .gaussian import Gaussian, w2_squared
from .numerics import RANK_TOL, SubspaceBasis, numerical_rank, projector, pseudo_inverse_apply, row_space_bases
from .varlinear import ClassificationProblem, RegressionProblem

log = logging.getLogger(__name__)

SUPPORT_TOL = 1e-6


class OracleError(ValueError):
    pass


class NotSeparableError(OracleError):
    pass


# -- regression ----------------------------------------------------------------


def _require_full_row_rank(x: np.ndarray):
    n, p = x.shape
    s = np.linalg.svd(x, compute_uv=False)
    if not (p > n and numerical_rank(s, RANK_TOL) == n):
        raise OracleError(f"need an overparametrized full-row-rank X, got shape {x.shape} with rank {numerical_rank(s)}")


def regression_implicit_bias_solution(prob: RegressionProblem, prior: Gaussian) -> Gaussian:
    """W2-closest zero-loss Gaussian: ``N(X^+ y + P_null mu_0, (P_null S_0)(P_null S_0)^T)``."""
    _require_full_row_rank(prob.X)
    _, null = row_space_bases(prob.X)
    p_null = projector(null)
    mean = pseudo_inverse_apply(prob.X, prob.y) + p_null @ prior.mean
    return Gaussian(mean, p_null @ prior.factor)


def ensemble_member_limit(prob: RegressionProblem, w0) -> np.ndarray:
    """Limit ``X^+ y + P_null w_0`` of (S)GD on a deterministic linear model started at ``w_0``."""
    _require_full_row_rank(prob.X)
    _, null = row_space_bases(prob.X)
    return pseudo_inverse_apply(prob.X, prob.y) + projector(null) @ np.asarray(w0, dtype=float)


# -- hard-margin SVM -----------------------------------------------------------


@dataclass(frozen=True)
class SvmSolution:
    w_hat: np.ndarray
    support_set: np.ndarray
    dual_coeffs: np.ndarray
    margin_gap: float
    X: np.ndarray

    @property
    def support_rows(self) -> np.ndarray:
        return self.X[self.support_set]


def is_separable(x: np.ndarray) -> bool:
    """Whether some ``w`` has ``x_n^T w > 0`` for every row."""
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    s = np.linalg.svd(x, compute_uv=False)
    if numerical_rank(s) == n:
        return True
    res = linprog(np.zeros(p), A_ub=-x, b_ub=-np.ones(n), bounds=[(None, None)] * p, method="highs")
    return res.status == 0


def _dual_warm_start(k: np.ndarray, iters: int = 5000) -> np.ndarray:
    """Projected gradient ascent on ``sum(a) - a^T K a / 2`` over ``a >= 0``."""
    step = 1.0 / max(np.linalg.eigvalsh(k)[-1], 1e-300)
    a = np.zeros(k.shape[0])
    for _ in range(iters):
        a_new = np.maximum(a + step * (1.0 - k @ a), 0.0)
        if np.max(np.abs(a_new - a)) < 1e-14 * max(1.0, np.max(a_new)):
            return a_new
        a = a_new
    return a


def _solve_on(x: np.ndarray, active: list[int]) -> tuple[np.ndarray, np.ndarray]:
    xa = x[active]
    alpha = np.linalg.lstsq(xa @ xa.T, np.ones(len(active)), rcond=None)[0]
    return alpha, xa.T @ alpha


def hard_margin_svm(x) -> SvmSolution:
    """L2 max-margin vector ``argmin ||w||^2 s.t. x_n^T w >= 1``.

    A dual projected-gradient warm start proposes an active set, which is
    refined by solving the equality-constrained least-norm problem on it
    (dropping negative multipliers, adding violated constraints). Dual
    coefficients are finally recovered by NNLS on the identified support.

    Raises
    ------
    NotSeparableError
        If no separating direction exists.
    OracleError
        If the support set yields a negative or inconsistent dual representation.
    """
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    if not is_separable(x):
        raise NotSeparableError("data are not linearly separable")
    k = x @ x.T
    alpha0 = _dual_warm_start(k)
    active = [i for i in range(n) if alpha0[i] > 1e-8 * max(alpha0.max(), 1e-300)]
    if not active:
        active = [int(np.argmin(np.linalg.norm(x, axis=1)))]

    for _ in range(10 * n + 10):
        alpha_a, w = _solve_on(x, active)
        if alpha_a.min() < -1e-12 * max(1.0, np.abs(alpha_a).max()):
            active.pop(int(np.argmin(alpha_a)))
            continue
        margins = x @ w
        outside = [i for i in range(n) if i not in active]
        if outside:
            worst = min(outside, key=lambda i: margins[i])
            if margins[worst] < 1.0 - 1e-10:
                active.append(worst)
                continue
        break
    else:
        raise OracleError("active-set refinement did not terminate")

    margins = x @ w
    if margins.min() < 1.0 - 1e-8:
        raise OracleError(f"primal infeasible solution (min margin {margins.min():.3e})")
    support = np.flatnonzero(np.abs(margins - 1.0) < SUPPORT_TOL)
    coeffs, resid = nnls(x[support].T, w)
    if resid > 1e-7 * max(1.0, np.linalg.norm(w)):
        raise OracleError(f"max-margin vector is not a nonnegative combination of support vectors (residual {resid:.2e})")
    dual = np.zeros(n)
    dual[support] = coeffs
    off = np.setdiff1d(np.arange(n), support)
    kappa = float(margins[off].min()) if off.size else float("inf")
    return SvmSolution(w, support, dual, kappa, x)


# -- classification ------------------------------------------------------------


@dataclass(frozen=True)
class AssumptionReport:
    separable: bool
    support_spans_data: bool

    def __bool__(self):
        return self.separable and self.support_spans_data


def check_assumptions(prob: ClassificationProblem, rank_tol: float = RANK_TOL) -> AssumptionReport:
    """Report linear separability and whether the SVM support vectors span the data."""
    x = prob.X
    if not is_separable(x):
        return AssumptionReport(False, False)
    svm = hard_margin_svm(x)
    rank_x = numerical_rank(np.linalg.svd(x, compute_uv=False), rank_tol)
    rank_s = numerical_rank(np.linalg.svd(x[svm.support_set], compute_uv=False), rank_tol)
    return AssumptionReport(True, rank_s == rank_x)


def classification_feasible_minimizer(prob: ClassificationProblem, prior: Gaussian) -> Gaussian:
    """W2-closest Gaussian with range mean ``w_hat`` and zero predictive variance on the data."""
    report = check_assumptions(prob)
    if not report:
        raise OracleError(f"assumptions violated: {report}")
    svm = hard_margin_svm(prob.X)
    _, null = row_space_bases(prob.X)
    p_null = projector(null)
    return Gaussian(svm.w_hat + p_null @ prior.mean, p_null @ prior.factor)


@dataclass(frozen=True)
class WtildeSolution:
    w_tilde: np.ndarray
    residual: float


def w_tilde(svm: SvmSolution, eta: float) -> WtildeSolution:
    """Solve ``eta * exp(-x_n^T w) = alpha_n`` on the support set (minimum-norm solution)."""
    alpha = svm.dual_coeffs[svm.support_set]
    if np.any(alpha <= 0):
        raise OracleError("w_tilde needs strictly positive dual coefficients on the support")
    xs = svm.support_rows
    rhs = np.log(eta / alpha)
    w = pseudo_inverse_apply(xs, rhs)
    resid = float(np.max(np.abs(eta * np.exp(-(xs @ w)) - alpha)))
    if resid > 1e-6:
        raise OracleError(f"log-linear system is inconsistent (residual {resid:.2e})")
    return WtildeSolution(w, resid)


def factor_column_space(factor: np.ndarray, rank_tol: float = 1e-6) -> SubspaceBasis:
    """Orthonormal basis (via QR) of the column space of a covariance factor.

    Diagnostic only: after training, the columns of ``S_t`` lie approximately
    in null(X), so this basis approximates a subspace of the null space.
    """
    q, r = np.linalg.qr(factor)
    d = np.abs(np.diag(r))
    keep = d > rank_tol * max(d.max(), 1e-300) if d.size else np.zeros(0, bool)
    return SubspaceBasis(q[:, keep], "null")


def optimality_gap(
    oracle: Gaussian,
    prior: Gaussian,
    x: np.ndarray,
    fixed_range_mean: np.ndarray,
    n_candidates: int,
    seed: int = 0,
    scale: float = 1.0,
) -> float:
    """Smallest ``W2^2(candidate, prior) - W2^2(oracle, prior)`` over random feasible candidates.

    Candidates share the oracle's range-space mean and carry mean offsets and
    covariance factors drawn inside null(X), so each one is feasible.
    """
    _, null = row_space_bases(x)
    vn = null.basis
    rng = np.random.default_rng(seed)
    base = w2_squared(oracle, prior)
    best = np.inf
    r = prior.rank
    for _ in range(n_candidates):
        a = scale * rng.standard_normal(vn.shape[1])
        b = scale * rng.standard_normal((vn.shape[1], r))
        cand = Gaussian(fixed_range_mean + vn @ a, vn @ b)
        best = min(best, w2_squared(cand, prior) - base)
    return float(best)
