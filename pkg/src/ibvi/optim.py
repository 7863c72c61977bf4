"""SGD with momentum on variational parameters, exact gradient flow, rescaled iterates."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .gaussian import Gaussian, VariationalParams
from .numerics import RANK_TOL, projector, pseudo_inverse_apply, row_space_bases
from .varlinear import ClassificationProblem, RegressionProblem

log = logging.getLogger(__name__)

LOSS_CEILING = 1e12

# purpose tags for the counter-based RNG streams
BATCH_STREAM = 1
NOISE_STREAM = 2


class TrainingDivergedError(FloatingPointError):
    def __init__(self, step: int, reason: str):
        super().__init__(f"training diverged at step {step}: {reason}")
        self.step = step


def stream(seed: int, counter: int, purpose: int) -> np.random.Generator:
    """Independent, replayable generator keyed by ``(seed, purpose, counter)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(purpose), int(counter)]))


@dataclass
class SgdConfig:
    learning_rate: float
    steps: int
    momentum: float = 0.0
    nesterov: bool = False
    batch_size: int | None = None  # None: full batch
    param_samples: int = 1
    schedule: str = "constant"  # or "one-over-t"
    t0: float = 1.0
    record_every: int = 1
    keep_snapshots: bool = True

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if self.param_samples < 1:
            raise ValueError("param_samples must be >= 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.schedule not in ("constant", "one-over-t"):
            raise ValueError(f"unknown schedule {self.schedule!r}")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")

    def lr_at(self, t: int) -> float:
        if self.schedule == "constant":
            return self.learning_rate
        return self.learning_rate / (self.t0 + t)


@dataclass
class TrainTrace:
    """Strided record of an optimization run.

    ``losses[i]`` is the minibatch loss at the gradient evaluation point of
    step ``steps[i]``; ``thetas[i]`` the parameters after ``steps[i]`` updates.
    """

    steps: list[int] = field(default_factory=list)
    thetas: list = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    grad_norms: list[float] = field(default_factory=list)
    diagnostics: dict[str, list[float]] = field(default_factory=dict)

    def record(self, t, theta, loss, grad_norm, diag, keep):
        if self.steps and t <= self.steps[-1]:
            raise ValueError("trace steps must be strictly increasing")
        self.steps.append(t)
        self.thetas.append(theta if keep else None)
        self.losses.append(float(loss))
        self.grad_norms.append(float(grad_norm))
        for key, value in (diag or {}).items():
            self.diagnostics.setdefault(key, []).append(float(value))

    @property
    def final(self):
        return self.thetas[-1]

    def __len__(self):
        return len(self.steps)


def _batches_for_step(t: int, n_data: int, batch_size: int, seed: int) -> np.ndarray:
    """Epoch-wise shuffled minibatch used at step ``t``."""
    per_epoch = -(-n_data // batch_size)
    epoch, pos = divmod(t, per_epoch)
    order = stream(seed, epoch, BATCH_STREAM).permutation(n_data)
    return np.sort(order[pos * batch_size : (pos + 1) * batch_size])


def sgd_run(
    loss_grad: Callable,
    theta0,
    cfg: SgdConfig,
    rng_seed: int = 0,
    *,
    n_data: int,
    noise_dim: int = 0,
    lr_multipliers: Sequence[float] | None = None,
    monitor: Callable | None = None,
    stop: Callable | None = None,
) -> TrainTrace:
    """Run (stochastic) gradient descent with heavy-ball or Nesterov momentum.

    The update is ``theta_{t+1} = theta_t + gamma * d_t - eta_t * m * grad(theta_t + alpha * d_t)``
    with ``d_t = theta_t - theta_{t-1}``, ``d_0 = 0``, ``alpha = gamma`` for
    Nesterov and ``0`` for heavy ball, and ``m`` a per-array learning-rate
    multiplier.

    Parameters
    ----------
    loss_grad : callable
        ``loss_grad(theta, batch_idx, noise) -> (loss, grads)`` where ``grads``
        matches ``theta.as_arrays()`` and ``noise`` is an
        ``(param_samples, noise_dim)`` standard-normal array.
    theta0 : object with ``as_arrays()`` / ``with_arrays()``
        Initial parameters (e.g. :class:`VariationalParams`).
    n_data : int
        Number of training points; minibatches index ``range(n_data)``.
    monitor : callable, optional
        ``monitor(theta, t) -> dict`` of diagnostics stored at recorded steps.
    stop : callable, optional
        ``stop(theta, t, loss) -> bool`` checked at recorded steps; ends the run early.

    Raises
    ------
    TrainingDivergedError
        On non-finite loss or gradients, or a loss above 1e12.
    """
    batch_size = n_data if cfg.batch_size is None else cfg.batch_size
    if batch_size > n_data:
        raise ValueError(f"batch_size {batch_size} exceeds dataset size {n_data}")
    full_batch = batch_size == n_data
    all_idx = np.arange(n_data)
    alpha = cfg.momentum if cfg.nesterov else 0.0

    arrays = [np.array(a, dtype=float, copy=True) for a in theta0.as_arrays()]
    mults = [1.0] * len(arrays) if lr_multipliers is None else [float(m) for m in lr_multipliers]
    if len(mults) != len(arrays):
        raise ValueError("need one learning-rate multiplier per parameter array")
    delta = [np.zeros_like(a) for a in arrays]
    trace = TrainTrace()

    for t in range(cfg.steps + 1):
        batch = all_idx if full_batch else _batches_for_step(t, n_data, batch_size, rng_seed)
        if noise_dim > 0:
            noise = stream(rng_seed, t, NOISE_STREAM).standard_normal((cfg.param_samples, noise_dim))
        else:
            noise = np.zeros((cfg.param_samples, 0))
        if alpha:
            point = theta0.with_arrays([a + alpha * d for a, d in zip(arrays, delta)])
        else:
            point = theta0.with_arrays(arrays)
        loss, grads = loss_grad(point, batch, noise)
        grads = [np.asarray(g, dtype=float) for g in grads]
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads):
            raise TrainingDivergedError(t, "non-finite loss or gradient")
        if loss > LOSS_CEILING:
            raise TrainingDivergedError(t, f"loss {loss:.3e} exceeds {LOSS_CEILING:g}")

        last = t == cfg.steps
        if last or t % cfg.record_every == 0:
            theta = theta0.with_arrays([a.copy() for a in arrays])
            gnorm = float(np.sqrt(sum(np.sum(g * g) for g in grads)))
            diag = monitor(theta, t) if monitor is not None else None
            trace.record(t, theta, loss, gnorm, diag, cfg.keep_snapshots or last)
            if stop is not None and not last and stop(theta, t, loss):
                log.debug("stopping criterion met at step %d", t)
                trace.thetas[-1] = theta
                break
        if last:
            break

        eta = cfg.lr_at(t)
        for i, (a, g) in enumerate(zip(arrays, grads)):
            step = cfg.momentum * delta[i] - eta * mults[i] * g
            a += step
            delta[i] = step
    return trace


def expected_loss_estimate(pointwise_loss: Callable, theta, batch, noise_draws) -> float:
    """Monte-Carlo minibatch objective ``(1 / (N_b M)) sum_n sum_m loss(y_n, f_{w_m}(x_n))``.

    ``pointwise_loss(theta, batch, z)`` returns the per-point losses for one
    standard-normal draw ``z``.
    """
    noise_draws = np.atleast_2d(np.asarray(noise_draws, dtype=float))
    if noise_draws.shape[0] < 1:
        raise ValueError("need at least one noise draw")
    total = 0.0
    count = 0
    for z in noise_draws:
        losses = np.asarray(pointwise_loss(theta, batch, z), dtype=float)
        total += float(np.sum(losses))
        count += losses.size
    return total / count


def gradient_flow_regression(prob: RegressionProblem, theta0: VariationalParams, times) -> list[VariationalParams]:
    """Exact solution of the gradient flow of the expected regression loss.

    ``mu(t) = X^+ y + exp(-X^T X t / sigma2)(mu_0 - X^+ y)`` and
    ``S(t) = exp(-X^T X t / sigma2) S_0``, evaluated through the
    eigendecomposition of ``X^T X``.
    """
    times = np.asarray(times, dtype=float)
    if np.any(times < 0) or np.any(np.diff(times) < 0):
        raise ValueError("times must be non-negative and ascending")
    x = prob.X
    evals, q = np.linalg.eigh(x.T @ x / prob.sigma2)
    evals = np.maximum(evals, 0.0)
    w = pseudo_inverse_apply(x, prob.y)
    mu_off = q.T @ (theta0.mu - w)
    s_off = q.T @ theta0.factor
    out = []
    for t in times:
        if t == 0.0:
            out.append(theta0.copy())
            continue
        decay = np.exp(-evals * t)
        mu = w + q @ (decay * mu_off)
        factor = q @ (decay[:, None] * s_off)
        out.append(VariationalParams(mu, factor))
    return out


def rescaled_iterates(
    trace: TrainTrace, prob: ClassificationProblem, prior: Gaussian, rank_tol: float = RANK_TOL
) -> list[VariationalParams]:
    """Rescaled GD iterates ``(mu_t / log t + P_null mu_0, S_t)``.

    One entry per recorded step with ``t >= 2`` (in trace order).
    """
    usable = [(t, th) for t, th in zip(trace.steps, trace.thetas) if t >= 2 and th is not None]
    if not usable:
        raise ValueError("rescaling needs recorded steps with t >= 2")
    _, null = row_space_bases(prob.X, rank_tol)
    null_mean = projector(null) @ prior.mean
    return [VariationalParams(th.mu / np.log(t) + null_mean, th.factor) for t, th in usable]
