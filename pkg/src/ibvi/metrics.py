"""Classification metrics (accuracy, NLL, ECE) and temperature scaling."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import log_softmax

PROB_FLOOR = 1e-12
ROW_SUM_TOL = 1e-8
LOG_T_BRACKET = (-4.0, 4.0)
LOG_T_TOL = 1e-4


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class PredictionBatch:
    """Predicted class probabilities (N x C) and integer labels."""

    probs: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        probs = np.atleast_2d(np.asarray(self.probs, dtype=float))
        labels = np.asarray(self.labels).reshape(-1).astype(int)
        if probs.shape[0] == 0:
            raise MetricsError("empty prediction batch")
        if labels.shape[0] != probs.shape[0]:
            raise MetricsError(f"{labels.shape[0]} labels for {probs.shape[0]} rows")
        if np.any(probs < 0) or np.any(probs > 1):
            raise MetricsError("probabilities must lie in [0, 1]")
        if np.any(np.abs(probs.sum(axis=1) - 1.0) > ROW_SUM_TOL):
            raise MetricsError("probability rows must sum to 1")
        if np.any(labels < 0) or np.any(labels >= probs.shape[1]):
            raise MetricsError("labels out of range")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "labels", labels)

    @classmethod
    def from_logits(cls, logits, labels, temperature: float = 1.0) -> PredictionBatch:
        return cls(softmax(np.asarray(logits, dtype=float) / temperature), labels)


@dataclass(frozen=True)
class Temperature:
    value: float

    def __post_init__(self):
        if not self.value > 0:
            raise MetricsError("temperature must be positive")


def softmax(logits: np.ndarray) -> np.ndarray:
    p = np.exp(log_softmax(np.atleast_2d(logits), axis=1))
    return p / p.sum(axis=1, keepdims=True)


def accuracy(batch: PredictionBatch) -> float:
    """Top-1 accuracy; ``np.argmax`` breaks ties towards the lowest class index."""
    return float(np.mean(np.argmax(batch.probs, axis=1) == batch.labels))


def nll(batch: PredictionBatch) -> float:
    """Mean negative log-probability of the true label (probabilities floored at 1e-12)."""
    p_true = batch.probs[np.arange(batch.labels.size), batch.labels]
    return float(-np.mean(np.log(np.maximum(p_true, PROB_FLOOR))))


def ece(batch: PredictionBatch, n_bins: int = 15) -> float:
    """Expected calibration error with equal-width, right-inclusive confidence bins.

    Bin ``j`` covers ``(j / n_bins, (j + 1) / n_bins]``; confidence 0 falls in
    the first bin.
    """
    if n_bins < 1:
        raise MetricsError("n_bins must be >= 1")
    conf = batch.probs.max(axis=1)
    correct = (np.argmax(batch.probs, axis=1) == batch.labels).astype(float)
    idx = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    n = conf.size
    total = 0.0
    for j in range(n_bins):
        mask = idx == j
        if mask.any():
            total += mask.sum() / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def _nll_at(logits: np.ndarray, labels: np.ndarray, log_t: float) -> float:
    logp = log_softmax(logits / math.exp(log_t), axis=1)
    return float(-np.mean(logp[np.arange(labels.size), labels]))


def fit_temperature(logits, labels, bracket: tuple[float, float] = LOG_T_BRACKET, tol: float = LOG_T_TOL) -> Temperature:
    """Temperature minimizing validation NLL, by golden-section search on ``log T``.

    Raises
    ------
    MetricsError
        If the validation labels contain a single class (the NLL is then
        monotone in ``T`` and the optimum sits on the bracket edge).
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=float))
    labels = np.asarray(labels).reshape(-1).astype(int)
    if labels.size != logits.shape[0]:
        raise MetricsError("one label per logit row required")
    if np.unique(labels).size < 2:
        raise MetricsError("temperature fitting needs at least two classes in the validation set")

    inv_phi = (math.sqrt(5.0) - 1.0) / 2.0
    a, b = bracket
    c = b - inv_phi * (b - a)
    d = a + inv_phi * (b - a)
    fc, fd = _nll_at(logits, labels, c), _nll_at(logits, labels, d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - inv_phi * (b - a)
            fc = _nll_at(logits, labels, c)
        else:
            a, c, fc = c, d, fd
            d = a + inv_phi * (b - a)
            fd = _nll_at(logits, labels, d)
    return Temperature(math.exp(0.5 * (a + b)))
