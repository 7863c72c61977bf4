"""Initialization scales and learning-rate multipliers for SP and variational muP.

Each layer ``l`` carries mean exponents ``(b, c)`` and factor exponents
``(b_tilde, c_tilde)``: parameters are initialized with std ``D^{-b}`` and
trained with learning rate ``eta * D^{-c}``. The rank of the covariance factor
enters through ``R = (D_in * D_out)^p``; in practice the rank correction is
applied as ``factor_init_std = mean_init_std * R^{-1/2}`` and
``factor_lr_mult = mean_lr_mult / R``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .varnet import LayerSpec, NetParams

KINDS = ("SP", "muP")
EXPONENT_TOL = 1e-12


class ParametrizationError(ValueError):
    pass


@dataclass(frozen=True)
class LayerScaling:
    mean_init_std: float
    mean_lr_mult: float
    factor_init_std: float
    factor_lr_mult: float
    width: int
    rank: int


@dataclass(frozen=True)
class ParametrizationSpec:
    """Per-layer exponents plus optional experiment-specific multipliers.

    Parameters
    ----------
    kind : {"SP", "muP"}
    b, c : tuple of float
        Mean init and learning-rate exponents, one per layer.
    p : tuple of float, optional
        Rank exponents in ``[0, 1]``. Leave as ``None`` to infer them from the
        ranks handed to :func:`derive_scaling`.
    b_tilde, c_tilde : tuple of float, optional
        Factor exponents. Default ``b + p * (1/2, 1, ..., 1, 1/2)`` and
        ``c + p * (1, 2, ..., 2, 1)``.
    rank_correction : bool
        Apply the ``R^{-1/2}`` init and ``R^{-1}`` learning-rate correction to
        the covariance factors.
    init_mults, forward_mults : tuple of float, optional
        Extra constant factors on the mean init and on the forward pass of
        each layer (e.g. a zero-initialized output layer).
    """

    kind: str
    b: tuple
    c: tuple
    p: tuple | None = None
    b_tilde: tuple | None = None
    c_tilde: tuple | None = None
    global_lr: float = 1.0
    rank_correction: bool = True
    init_mults: tuple | None = None
    forward_mults: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParametrizationError(f"unknown parametrization {self.kind!r}")
        n = len(self.b)
        for name in ("c", "p", "b_tilde", "c_tilde", "init_mults", "forward_mults"):
            val = getattr(self, name)
            if val is not None and len(val) != n:
                raise ParametrizationError(f"{name} has {len(val)} entries for {n} layers")
        for name in ("b", "c", "p", "b_tilde", "c_tilde"):
            val = getattr(self, name)
            if val is not None and not all(math.isfinite(v) for v in val):
                raise ParametrizationError(f"exponents {name} must be finite")
        if self.p is not None and not all(0.0 <= v <= 1.0 for v in self.p):
            raise ParametrizationError("rank exponents must lie in [0, 1]")
        if not self.global_lr > 0:
            raise ParametrizationError("global_lr must be positive")

    @property
    def n_layers(self) -> int:
        return len(self.b)

    @classmethod
    def standard(cls, n_layers: int, global_lr: float = 1.0, **kw) -> ParametrizationSpec:
        """Standard parametrization: init variance ``1 / fan_in``, unit learning-rate multipliers."""
        return cls("SP", (0.5,) * n_layers, (0.0,) * n_layers, global_lr=global_lr, **kw)

    @classmethod
    def mup(cls, n_layers: int, global_lr: float = 1.0, **kw) -> ParametrizationSpec:
        """Maximal update parametrization: ``b = (0, 1/2, ..., 1)``, ``c = (-1, 0, ..., 1)``."""
        if n_layers < 2:
            raise ParametrizationError("muP needs at least an input and an output layer")
        b = (0.0,) + (0.5,) * (n_layers - 2) + (1.0,)
        c = (-1.0,) + (0.0,) * (n_layers - 2) + (1.0,)
        return cls("muP", b, c, global_lr=global_lr, **kw)


def _rank_weights(n_layers: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-layer multipliers of ``p`` in ``b_tilde - b`` and ``c_tilde - c``."""
    init = np.ones(n_layers)
    init[0] = init[-1] = 0.5
    return init, 2.0 * init


def factor_exponents(spec: ParametrizationSpec, p) -> tuple[np.ndarray, np.ndarray]:
    """``(b_tilde, c_tilde)`` implied by ``spec`` and rank exponents ``p``."""
    p = np.asarray(p, dtype=float)
    wi, wl = _rank_weights(spec.n_layers)
    bt = np.asarray(spec.b_tilde, float) if spec.b_tilde is not None else np.asarray(spec.b) + wi * p
    ct = np.asarray(spec.c_tilde, float) if spec.c_tilde is not None else np.asarray(spec.c) + wl * p
    return bt, ct


def reference_width(spec: ParametrizationSpec, layer: LayerSpec, index: int) -> int:
    """Width ``D`` the exponents are evaluated at.

    SP always uses the fan-in. Under muP the first layer's fan-in is the
    (fixed) input dimension, so its width is the fan-out; later layers use
    the fan-in.
    """
    if spec.kind == "muP" and index == 0:
        return layer.fan_out
    return layer.fan_in


def check_stability(spec: ParametrizationSpec, p) -> None:
    """Reject exponents that violate the stability-at-initialization conditions.

    Requires ``b^1 >= 0``, ``b^l >= 1/2`` for ``l >= 2`` and
    ``b_tilde >= b + p * (1/2, 1, ..., 1/2)``.
    """
    b = np.asarray(spec.b, dtype=float)
    if b[0] < -EXPONENT_TOL:
        raise ParametrizationError(f"input-layer exponent b^1 = {b[0]} must be >= 0")
    if np.any(b[1:] < 0.5 - EXPONENT_TOL):
        raise ParametrizationError(f"hidden/output exponents b^l must be >= 1/2, got {b[1:]}")
    bt, _ = factor_exponents(spec, p)
    wi, _ = _rank_weights(spec.n_layers)
    if np.any(bt < b + wi * np.asarray(p, float) - EXPONENT_TOL):
        raise ParametrizationError("factor init exponents b_tilde fall below b + rank term")


def derive_scaling(spec: ParametrizationSpec, layers: list[LayerSpec], ranks=None) -> list[LayerScaling]:
    """Per-layer init stds and learning-rate multipliers.

    Parameters
    ----------
    spec : ParametrizationSpec
    layers : list of LayerSpec
        Supplies the widths (and ranks, when ``ranks`` is omitted).
    ranks : sequence of int, optional
        Covariance rank per layer; deterministic layers may pass 0. Diagonal
        (mean-field) layers count as rank 1: every weight has its own noise
        variable, so no sum over rank directions needs correcting.

    Raises
    ------
    ParametrizationError
        On zero widths, inconsistent lengths, zero ranks with rank-dependent
        exponents, or violated stability conditions.
    """
    if len(layers) != spec.n_layers:
        raise ParametrizationError(f"spec has {spec.n_layers} layers, network has {len(layers)}")
    if ranks is None:
        ranks = [1 if ls.probabilistic and ls.covariance == "diagonal" else ls.rank for ls in layers]
    if len(ranks) != len(layers):
        raise ParametrizationError("need one rank per layer")
    widths = [reference_width(spec, ls, i) for i, ls in enumerate(layers)]
    if any(w < 1 for w in widths):
        raise ParametrizationError("widths must be positive")

    supplied = spec.p is None
    p = []
    for i, (ls, r) in enumerate(zip(layers, ranks)):
        if r < 0:
            raise ParametrizationError("ranks must be non-negative")
        if not supplied:
            p.append(float(spec.p[i]))
        elif r == 0 or ls.n_weights == 1:
            p.append(0.0)
        else:
            p.append(math.log(r) / math.log(ls.n_weights))
    check_stability(spec, p)
    bt, ct = factor_exponents(spec, p)

    out = []
    for i, (ls, d, r) in enumerate(zip(layers, widths, ranks)):
        mean_std = float(d) ** (-spec.b[i])
        mean_lr = float(d) ** (-spec.c[i])
        probabilistic = ls.probabilistic
        if probabilistic and r == 0:
            raise ParametrizationError(f"layer {i} is probabilistic with rank 0")
        if not probabilistic:
            f_std, f_lr = mean_std, mean_lr
        elif supplied:
            # ranks given directly: realize b_tilde / c_tilde through R
            f_std = mean_std * (r**-0.5 if spec.rank_correction else 1.0)
            f_lr = mean_lr * (1.0 / r if spec.rank_correction and spec.kind == "muP" else 1.0)
        else:
            f_std = float(d) ** (-bt[i]) if spec.rank_correction else mean_std
            f_lr = float(d) ** (-ct[i]) if spec.rank_correction and spec.kind == "muP" else mean_lr
        if spec.init_mults is not None:
            mean_std *= spec.init_mults[i]
        out.append(LayerScaling(mean_std, mean_lr, f_std, f_lr, d, int(r)))
    return out


def lr_multipliers(scalings: list[LayerScaling]) -> list[float]:
    """Multipliers aligned with ``NetParams.as_arrays()``."""
    out = []
    for s in scalings:
        out.extend([s.mean_lr_mult, s.factor_lr_mult])
    return out


def apply_forward_mults(spec: ParametrizationSpec, layers: list[LayerSpec]) -> list[LayerSpec]:
    if spec.forward_mults is None:
        return list(layers)
    out = []
    for ls, m in zip(layers, spec.forward_mults):
        out.append(LayerSpec(ls.fan_in, ls.fan_out, ls.probabilistic, ls.rank, ls.activation, ls.covariance, float(m)))
    return out


def init_net(spec: ParametrizationSpec, layers: list[LayerSpec], rng_seed: int) -> NetParams:
    """Gaussian initialization with the per-layer stds of :func:`derive_scaling`.

    Low-rank factors get i.i.d. Gaussian entries; diagonal (mean-field)
    factors are set to the constant ``factor_init_std``.
    """
    scalings = derive_scaling(spec, layers)
    rng = np.random.default_rng(rng_seed)
    mus, factors = [], []
    for ls, sc in zip(layers, scalings):
        mus.append(sc.mean_init_std * rng.standard_normal((ls.fan_out, ls.fan_in)))
        shape = ls.factor_shape()
        if not ls.probabilistic:
            factors.append(np.zeros(shape))
        elif ls.covariance == "diagonal":
            factors.append(np.full(shape, sc.factor_init_std))
        else:
            factors.append(sc.factor_init_std * rng.standard_normal(shape))
    return NetParams(mus, factors, list(layers))
