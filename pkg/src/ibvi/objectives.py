"""Training objectives: plain expected loss, KL-regularized ELBO, W2-regularized generalized VI.

Every objective has the form ``E_q[loss] + lambda * D(q, p)``; the plain
expected loss ignores ``lambda``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .gaussian import Gaussian, VariationalParams, kl_divergence, w2_squared
from .numerics import NumericsError

KINDS = ("expected_loss", "elbo_kl", "gvi_w2")
ISOTROPY_TOL = 1e-10
SINGULAR_GAP_TOL = 1e-10


class ObjectiveError(ValueError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    lam: float = 0.0
    prior: Gaussian | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ObjectiveError(f"unknown objective {self.kind!r}")
        if not (math.isfinite(self.lam) and self.lam >= 0):
            raise ObjectiveError("lambda must be finite and non-negative")
        if self.kind != "expected_loss" and self.prior is None:
            raise ObjectiveError(f"{self.kind} needs a prior")
        if self.kind == "elbo_kl" and np.linalg.matrix_rank(self.prior.cov) < self.prior.dim:
            raise ObjectiveError("elbo_kl needs a full-rank prior")

    @property
    def regularized(self) -> bool:
        return self.kind != "expected_loss" and self.lam > 0


def isotropic_scale(prior: Gaussian, tol: float = ISOTROPY_TOL) -> float:
    """``sigma_0`` if the prior covariance is ``sigma_0^2 I``, otherwise raise."""
    cov = prior.cov
    s2 = float(np.trace(cov)) / prior.dim
    if np.max(np.abs(cov - s2 * np.eye(prior.dim))) > tol * max(1.0, s2):
        raise ObjectiveError("W2 gradients are implemented for isotropic priors only")
    return math.sqrt(s2)


def regularizer_value(spec: ObjectiveSpec, theta: VariationalParams) -> float:
    q = theta.gaussian()
    if spec.kind == "gvi_w2":
        return w2_squared(q, spec.prior)
    if spec.kind == "elbo_kl":
        try:
            return kl_divergence(q, spec.prior)
        except NumericsError as exc:
            raise ObjectiveError(f"KL is infinite for a rank-deficient q: {exc}") from exc
    return 0.0


def objective_value(spec: ObjectiveSpec, loss_fn, theta: VariationalParams) -> float:
    """``loss_fn(theta) + lambda * D(q_theta, prior)``."""
    loss = float(loss_fn(theta))
    if spec.kind == "expected_loss" or spec.lam == 0:
        if spec.kind == "elbo_kl":
            regularizer_value(spec, theta)  # still reject rank-deficient q
        return loss
    return loss + spec.lam * regularizer_value(spec, theta)


def w2_isotropic_grad(theta: VariationalParams, prior: Gaussian):
    """Gradient of ``W2^2(q, N(mu_0, sigma_0^2 I))`` w.r.t. ``(mu, S)``.

    With ``S = U diag(s) V^T`` the Bures term is ``tr(S S^T) - 2 sigma_0 ||S||_*``,
    giving ``2 S - 2 sigma_0 U V^T``. Returns ``(grad_mu, grad_factor, degenerate)``
    where ``degenerate`` flags repeated or zero singular values, at which
    ``U V^T`` is one element of the subdifferential.
    """
    sigma0 = isotropic_scale(prior)
    u, s, vt = np.linalg.svd(theta.factor, full_matrices=False)
    gaps = np.abs(np.diff(s)) if s.size > 1 else np.zeros(0)
    degenerate = bool(np.any(gaps < SINGULAR_GAP_TOL) or (s.size and s[-1] < SINGULAR_GAP_TOL))
    grad_mu = 2.0 * (theta.mu - prior.mean)
    grad_factor = 2.0 * theta.factor - 2.0 * sigma0 * (u @ vt)
    return grad_mu, grad_factor, degenerate


def kl_grad(theta: VariationalParams, prior: Gaussian):
    """Gradient of ``KL(q || p)`` for a full-rank ``q`` (``S S^T`` invertible)."""
    s = theta.factor
    cov_p = prior.cov
    grad_mu = np.linalg.solve(cov_p, theta.mu - prior.mean)
    try:
        inv_cov_q_s = np.linalg.solve(s @ s.T, s)
    except np.linalg.LinAlgError as exc:
        raise ObjectiveError("KL gradient needs a full-rank q") from exc
    grad_factor = np.linalg.solve(cov_p, s) - inv_cov_q_s
    return grad_mu, grad_factor


def objective_grad(spec: ObjectiveSpec, grad_fn, theta: VariationalParams, diagnostics: dict | None = None):
    """Model gradients ``grad_fn(theta)`` plus ``lambda`` times the regularizer gradients.

    When ``diagnostics`` is given, ``diagnostics["degenerate_svd"]`` records
    whether the W2 subgradient was used at a degenerate SVD.
    """
    gm, gf = grad_fn(theta)
    gm, gf = np.array(gm, dtype=float), np.array(gf, dtype=float)
    if not spec.regularized:
        return gm, gf
    if spec.kind == "gvi_w2":
        rm, rf, degenerate = w2_isotropic_grad(theta, spec.prior)
        if diagnostics is not None:
            diagnostics["degenerate_svd"] = degenerate
    else:
        rm, rf = kl_grad(theta, spec.prior)
    return gm + spec.lam * rm, gf + spec.lam * rf


def regularized_loss_grad(spec: ObjectiveSpec, model_loss_grad):
    """Wrap an :func:`ibvi.optim.sgd_run` callback so that it optimizes the full objective."""

    def loss_grad(theta, batch, noise):
        loss, (gm, gf) = model_loss_grad(theta, batch, noise)
        if not spec.regularized:
            return loss, (gm, gf)
        if spec.kind == "gvi_w2":
            rm, rf, _ = w2_isotropic_grad(theta, spec.prior)
        else:
            rm, rf = kl_grad(theta, spec.prior)
        return loss + spec.lam * regularizer_value(spec, theta), (gm + spec.lam * rm, gf + spec.lam * rf)

    return loss_grad


# -- mean-field networks --------------------------------------------------------


def mean_field_kl(net, prior_stds) -> tuple[float, list[np.ndarray]]:
    """KL between diagonal-Gaussian layers and zero-mean isotropic per-layer priors.

    ``prior_stds[l]`` is the prior std of layer ``l`` (ignored for layers
    that are not mean-field). Returns the KL and gradients aligned with
    ``net.as_arrays()``; deterministic and low-rank layers contribute zero.
    """
    total = 0.0
    grads = []
    for mu, factor, spec, s0 in zip(net.mus, net.factors, net.specs, prior_stds):
        if not (spec.probabilistic and spec.covariance == "diagonal"):
            grads.extend([np.zeros_like(mu), np.zeros_like(factor)])
            continue
        if np.any(factor == 0):
            raise ObjectiveError("mean-field KL is infinite for a zero standard deviation")
        m = mu.reshape(-1)
        v0 = s0 * s0
        total += 0.5 * float(np.sum((factor**2 + m**2) / v0 - 1.0 - np.log(factor**2 / v0)))
        grads.extend([mu / v0, factor / v0 - 1.0 / factor])
    return total, grads
