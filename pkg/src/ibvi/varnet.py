"""Biasless variational MLPs with Gaussian layers ``vec(W) = mu + S z``.

Forward passes take the noise explicitly; the backward pass is written out by
hand (pathwise gradients w.r.t. the mean and the covariance factor).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussian import ShapeError

ACTIVATIONS = ("relu", "tanh", "identity")
COVARIANCES = ("lowrank", "diagonal")


@dataclass(frozen=True)
class LayerSpec:
    fan_in: int
    fan_out: int
    probabilistic: bool = False
    rank: int = 0
    activation: str = "relu"
    covariance: str = "lowrank"
    forward_mult: float = 1.0

    def __post_init__(self):
        if self.fan_in < 1 or self.fan_out < 1:
            raise ValueError("layer dimensions must be positive")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.covariance not in COVARIANCES:
            raise ValueError(f"unknown covariance structure {self.covariance!r}")
        if not self.probabilistic and self.rank != 0:
            raise ValueError("deterministic layers must have rank 0")
        if self.probabilistic and self.covariance == "diagonal":
            object.__setattr__(self, "rank", self.n_weights)
        if self.rank < 0 or self.rank > self.n_weights:
            raise ValueError(f"rank {self.rank} outside [0, {self.n_weights}]")

    @property
    def n_weights(self) -> int:
        return self.fan_in * self.fan_out

    @property
    def noise_dim(self) -> int:
        return self.rank if self.probabilistic else 0

    def factor_shape(self) -> tuple[int, ...]:
        if not self.probabilistic:
            return (self.n_weights, 0)
        if self.covariance == "diagonal":
            return (self.n_weights,)
        return (self.n_weights, self.rank)


def mlp_specs(
    widths: list[int],
    probabilistic: list[bool] | None = None,
    ranks: list[int] | None = None,
    covariance: str = "lowrank",
    activation: str = "relu",
) -> list[LayerSpec]:
    """Layer specs for an MLP with ``activation`` hidden layers and an identity output layer."""
    n_layers = len(widths) - 1
    probabilistic = probabilistic or [False] * n_layers
    ranks = ranks or [0] * n_layers
    specs = []
    for i in range(n_layers):
        specs.append(
            LayerSpec(
                widths[i],
                widths[i + 1],
                probabilistic=probabilistic[i],
                rank=ranks[i] if probabilistic[i] else 0,
                activation="identity" if i == n_layers - 1 else activation,
                covariance=covariance,
            )
        )
    return specs


def _activate(pre: np.ndarray, activation: str) -> np.ndarray:
    if activation == "relu":
        return np.maximum(pre, 0.0)
    if activation == "tanh":
        return np.tanh(pre)
    return pre


@dataclass
class NetParams:
    """Per-layer mean matrices (fan_out x fan_in) and covariance factors."""

    mus: list[np.ndarray]
    factors: list[np.ndarray]
    specs: list[LayerSpec] = field(default_factory=list, repr=False)

    def as_arrays(self) -> list[np.ndarray]:
        out = []
        for mu, factor in zip(self.mus, self.factors):
            out.extend([mu, factor])
        return out

    def with_arrays(self, arrays) -> NetParams:
        arrays = list(arrays)
        return NetParams(arrays[0::2], arrays[1::2], self.specs)

    def copy(self) -> NetParams:
        return NetParams([m.copy() for m in self.mus], [f.copy() for f in self.factors], self.specs)

    def zeros_like(self) -> NetParams:
        return NetParams([np.zeros_like(m) for m in self.mus], [np.zeros_like(f) for f in self.factors], self.specs)


def noise_dim(specs: list[LayerSpec]) -> int:
    return sum(s.noise_dim for s in specs)


def split_noise(specs: list[LayerSpec], noise) -> list[np.ndarray]:
    """Accept a flat noise vector or a per-layer list; return the per-layer list."""
    if isinstance(noise, (list, tuple)):
        parts = [np.asarray(z, dtype=float).reshape(-1) for z in noise]
    else:
        flat = np.asarray(noise, dtype=float).reshape(-1)
        if flat.size != noise_dim(specs):
            raise ShapeError(f"noise has {flat.size} entries, network needs {noise_dim(specs)}")
        parts, start = [], 0
        for s in specs:
            parts.append(flat[start : start + s.noise_dim])
            start += s.noise_dim
    for s, z in zip(specs, parts):
        if z.size != s.noise_dim:
            raise ShapeError(f"layer noise has {z.size} entries, expected {s.noise_dim}")
    return parts


def layer_weights(mu: np.ndarray, factor: np.ndarray, spec: LayerSpec, z: np.ndarray) -> np.ndarray:
    if spec.noise_dim == 0:
        return mu
    if spec.covariance == "diagonal":
        return mu + (factor * z).reshape(mu.shape)
    return mu + (factor @ z).reshape(mu.shape)


def _check_shapes(net: NetParams, specs: list[LayerSpec]):
    if len(net.mus) != len(specs):
        raise ShapeError(f"{len(net.mus)} parameter layers for {len(specs)} specs")
    for i, (mu, factor, s) in enumerate(zip(net.mus, net.factors, specs)):
        if mu.shape != (s.fan_out, s.fan_in) or factor.shape != s.factor_shape():
            raise ShapeError(f"layer {i}: got mu {mu.shape}, factor {factor.shape} for {s}")


@dataclass
class ForwardCache:
    inputs: list[np.ndarray]
    weights: list[np.ndarray]
    pre: list[np.ndarray]
    post: list[np.ndarray]
    noise: list[np.ndarray]


def forward(net: NetParams, specs: list[LayerSpec], x, noise) -> tuple[np.ndarray, ForwardCache]:
    """One reparametrized forward pass with a single weight draw shared by the batch.

    ``x`` is a single input vector or a (B, fan_in) batch.
    """
    _check_shapes(net, specs)
    zs = split_noise(specs, noise)
    h = np.asarray(x, dtype=float)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    if h.shape[1] != specs[0].fan_in:
        raise ShapeError(f"input has {h.shape[1]} features, first layer expects {specs[0].fan_in}")
    cache = ForwardCache([], [], [], [], zs)
    for mu, factor, s, z in zip(net.mus, net.factors, specs, zs):
        w = layer_weights(mu, factor, s, z)
        pre = (h @ w.T) * s.forward_mult if s.forward_mult != 1.0 else h @ w.T
        post = _activate(pre, s.activation)
        cache.inputs.append(h)
        cache.weights.append(w)
        cache.pre.append(pre)
        cache.post.append(post)
        h = post
    return (h[0] if single else h), cache


def backward(net: NetParams, specs: list[LayerSpec], x, noise, grad_out, cache: ForwardCache | None = None) -> NetParams:
    """Pathwise gradients of a sampled loss w.r.t. every mean and factor entry.

    ``grad_out`` is dL/d(output) with the same shape as the forward output.
    """
    if cache is None:
        _, cache = forward(net, specs, x, noise)
    delta = np.atleast_2d(np.asarray(grad_out, dtype=float))
    grads = net.zeros_like()
    for i in range(len(specs) - 1, -1, -1):
        s = specs[i]
        if s.activation == "relu":
            delta = delta * (cache.pre[i] > 0)
        elif s.activation == "tanh":
            delta = delta * (1.0 - cache.post[i] ** 2)
        if s.forward_mult != 1.0:
            delta = delta * s.forward_mult
        dw = delta.T @ cache.inputs[i]
        grads.mus[i] = dw
        if s.noise_dim:
            z = cache.noise[i]
            flat = dw.reshape(-1)
            grads.factors[i] = flat * z if s.covariance == "diagonal" else np.outer(flat, z)
        if i > 0:
            delta = delta @ cache.weights[i]
    return grads


def forward_many(net: NetParams, specs: list[LayerSpec], x, noise_draws, chunk: int = 256) -> list[np.ndarray]:
    """Post-activations of every layer for many weight draws at once.

    Equivalent to calling :func:`forward` once per row of ``noise_draws``;
    returns one ``(M, B, fan_out)`` array per layer.
    """
    _check_shapes(net, specs)
    draws = np.atleast_2d(np.asarray(noise_draws, dtype=float))
    if draws.shape[1] != noise_dim(specs):
        raise ShapeError(f"noise draws have {draws.shape[1]} columns, network needs {noise_dim(specs)}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    outs = [[] for _ in specs]
    for start in range(0, draws.shape[0], chunk):
        block = draws[start : start + chunk]
        m = block.shape[0]
        h = np.broadcast_to(x, (m,) + x.shape)
        col = 0
        for i, (mu, factor, s) in enumerate(zip(net.mus, net.factors, specs)):
            pre = h @ mu.T
            if s.noise_dim:
                z = block[:, col : col + s.noise_dim]
                col += s.noise_dim
                fz = factor[:, None] * z.T if s.covariance == "diagonal" else factor @ z.T
                pre = pre + np.einsum("oik,kbi->kbo", fz.reshape(s.fan_out, s.fan_in, m), h)
            if s.forward_mult != 1.0:
                pre = pre * s.forward_mult
            h = _activate(pre, s.activation)
            outs[i].append(h)
    return [np.concatenate(o, axis=0) for o in outs]


def predictive_samples(net: NetParams, specs: list[LayerSpec], x, noise_draws) -> np.ndarray:
    """Network outputs for each row of ``noise_draws``: shape (M, B, fan_out)."""
    return forward_many(net, specs, x, noise_draws)[-1]


# -- training objective -----------------------------------------------------------


def squared_error_loss_grad(specs: list[LayerSpec], x, y, sigma2: float = 1.0, reduction: str = "mean"):
    """``loss_grad`` callback for :func:`ibvi.optim.sgd_run` on the minibatched expected loss.

    Loss is ``(1 / (N_b M)) sum_n sum_m (y_n - f_{w_m}(x_n))^2 / (2 sigma2)``
    with one fresh weight draw per noise row. ``reduction="sum"`` sums over
    the minibatch instead of averaging (a negative log-likelihood up to a
    constant when the batch is the full data set).
    """
    if reduction not in ("mean", "sum"):
        raise ValueError(f"unknown reduction {reduction!r}")
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.asarray(y, dtype=float).reshape(x.shape[0], -1)

    def loss_grad(net, batch, noise):
        xb, yb = x[batch], y[batch]
        m = noise.shape[0]
        scale = 1.0 / ((len(batch) if reduction == "mean" else 1) * m * sigma2)
        total = 0.0
        acc = None
        for z in noise:
            out, cache = forward(net, specs, xb, z)
            resid = out - yb
            total += 0.5 * scale * float(np.sum(resid * resid))
            g = backward(net, specs, xb, z, scale * resid, cache).as_arrays()
            acc = g if acc is None else [a + b for a, b in zip(acc, g)]
        return total, acc

    return loss_grad


# -- feature statistics -------------------------------------------------------------


@dataclass
class FeatureStats:
    """Per-layer noise moments of the features (post-activations, last entry = output).

    ``m1_*[l]`` and ``m2_*[l]`` are the mean and variance over the
    reparametrization noise, flattened over inputs and units.
    """

    m1_init: list[np.ndarray]
    m2_init: list[np.ndarray]
    m1_final: list[np.ndarray]
    m2_final: list[np.ndarray]

    @property
    def delta_m1(self) -> list[np.ndarray]:
        return [b - a for a, b in zip(self.m1_init, self.m1_final)]

    @property
    def delta_m2(self) -> list[np.ndarray]:
        return [b - a for a, b in zip(self.m2_init, self.m2_final)]

    def delta_rmse(self, moment: int) -> list[float]:
        deltas = self.delta_m1 if moment == 1 else self.delta_m2
        return [rmse(d) for d in deltas]

    def init_rmse(self, moment: int) -> list[float]:
        vals = self.m1_init if moment == 1 else self.m2_init
        return [rmse(v) for v in vals]


def rmse(v) -> float:
    """``sqrt(||v||^2 / D)`` for a length-D vector."""
    v = np.asarray(v, dtype=float).reshape(-1)
    return float(np.sqrt(np.mean(v * v))) if v.size else 0.0


def _moments(net, specs, x, draws):
    feats = [f.reshape(f.shape[0], -1) for f in forward_many(net, specs, x, draws)]
    # shifting by the first draw keeps constant features at exactly zero variance
    return [f.mean(axis=0) for f in feats], [(f - f[0]).var(axis=0) for f in feats]


def feature_stats(net0: NetParams, net_t: NetParams, specs: list[LayerSpec], x, n_noise: int, rng_seed: int) -> FeatureStats:
    """Monte-Carlo feature moments at initialization and after training.

    Both networks see the same noise draws (common random numbers).
    """
    if n_noise < 2:
        raise ValueError("need at least two noise draws to estimate moments")
    dim = noise_dim(specs)
    rng = np.random.default_rng(rng_seed)
    draws = rng.standard_normal((n_noise, dim)) if dim else np.zeros((n_noise, 0))
    m1_0, m2_0 = _moments(net0, specs, x, draws)
    m1_t, m2_t = _moments(net_t, specs, x, draws)
    return FeatureStats(m1_0, m2_0, m1_t, m2_t)
