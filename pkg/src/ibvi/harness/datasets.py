"""Synthetic problem generators for the experiments."""

from __future__ import annotations

import numpy as np

from ..gaussian import Gaussian, sample
from ..numerics import numerical_rank
from ..oracles import check_assumptions, hard_margin_svm
from ..varlinear import ClassificationProblem, RegressionProblem

RANK_REDRAWS = 5
CLASSIFICATION_TRIES = 100


class DatasetError(RuntimeError):
    pass


def generate_regression(seed: int, n: int, p: int, prior: Gaussian, sigma2: float = 1.0):
    """Noise-free regression ``y = X w`` with standard-normal ``X`` and ``w ~ prior``.

    Returns ``(problem, w)``. ``X`` is redrawn (up to 5 times) until it has
    full row rank.
    """
    if not p > n:
        raise ValueError(f"need P > N, got N={n}, P={p}")
    if prior.dim != p:
        raise ValueError(f"prior has dimension {prior.dim}, expected {p}")
    rng = np.random.default_rng(seed)
    for _ in range(RANK_REDRAWS):
        x = rng.standard_normal((n, p))
        if numerical_rank(np.linalg.svd(x, compute_uv=False)) == n:
            break
    else:
        raise DatasetError(f"X stayed rank deficient after {RANK_REDRAWS} draws")
    w = sample(prior, rng.standard_normal(prior.rank))
    return RegressionProblem(x, x @ w, sigma2), w


def _orthonormal_rows(rng, n: int, p: int) -> np.ndarray:
    q, _ = np.linalg.qr(rng.standard_normal((p, n)))
    return q.T


def generate_classification(
    seed: int, n: int, p: int, margin_gap_min: float = 0.05, design: str = "gaussian"
) -> ClassificationProblem:
    """Separable problem whose SVM support vectors span the data.

    Rows are standard normal (``design="gaussian"``) or orthonormal
    (``design="orthonormal"``), multiplied by random +-1 labels. Draws are
    rejected until the assumption check passes and the smallest non-support
    margin exceeds ``1 + margin_gap_min``.
    """
    if not p > n:
        raise ValueError(f"need P > N, got N={n}, P={p}")
    if design not in ("gaussian", "orthonormal"):
        raise ValueError(f"unknown design {design!r}")
    rng = np.random.default_rng(seed)
    for _ in range(CLASSIFICATION_TRIES):
        x = rng.standard_normal((n, p)) if design == "gaussian" else _orthonormal_rows(rng, n, p)
        labels = rng.choice([-1.0, 1.0], size=n)
        try:
            prob = ClassificationProblem.from_labels(x, labels)
        except ValueError:
            continue
        if not check_assumptions(prob):
            continue
        if hard_margin_svm(prob.X).margin_gap - 1.0 >= margin_gap_min:
            return prob
    raise DatasetError(f"no acceptable classification instance in {CLASSIFICATION_TRIES} draws")


def toy_regression(seed: int, n: int = 8, noise: float = 0.0):
    """1-D toy regression: two clusters of inputs on ``[-1, -0.3] U [0.3, 1]``, ``y = sin(3x)``."""
    rng = np.random.default_rng(seed)
    half = n // 2
    x = np.concatenate([rng.uniform(-1.0, -0.3, half), rng.uniform(0.3, 1.0, n - half)])
    y = np.sin(3.0 * x) + noise * rng.standard_normal(n)
    return x[:, None], y[:, None]
