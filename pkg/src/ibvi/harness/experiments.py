"""Experiment implementations: each returns result tables plus acceptance checks."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from ..gaussian import Gaussian, VariationalParams, predictive_variance, w2_squared
from ..numerics import gram_lambda_max, row_space_bases
from ..objectives import ObjectiveSpec, mean_field_kl, regularized_loss_grad
from ..optim import SgdConfig, TrainingDivergedError, gradient_flow_regression, rescaled_iterates, sgd_run
from ..oracles import (
    classification_feasible_minimizer,
    ensemble_member_limit,
    hard_margin_svm,
    regression_implicit_bias_solution,
)
from ..parametrization import ParametrizationSpec, apply_forward_mults, derive_scaling, init_net, lr_multipliers
from ..varlinear import (
    RegressionProblem,
    expected_regression_loss,
    exponential_loss_grad,
    loss_curvature_bound,
    regression_loss_grad,
)
from ..varnet import feature_stats, mlp_specs, noise_dim, predictive_samples, squared_error_loss_grad
from .config import ExperimentConfig
from .datasets import generate_classification, generate_regression, toy_regression
from .results import Check, ExperimentResult, ResultTable

log = logging.getLogger(__name__)


# -- shared helpers ---------------------------------------------------------------


def replica_seed(seed: int, index: int) -> int:
    """Independent per-task seed derived from the run seed and a task index."""
    return int(np.random.SeedSequence([int(seed), int(index)]).generate_state(1)[0])


def pool_map(fn, items, threads: int = 1) -> list:
    """``[fn(i) for i in items]``, optionally on a thread pool; output order follows ``items``."""
    items = list(items)
    if threads <= 1 or len(items) <= 1:
        return [fn(i) for i in items]
    with ThreadPoolExecutor(max_workers=threads) as ex:
        return list(ex.map(fn, items))


def linear_prior(rng, p: int, rank: int, scale: float, mean_scale: float = 1.0) -> Gaussian:
    """Prior with ``N(0, mean_scale^2)`` mean entries and factor ``scale * I`` (full rank)
    or ``scale * G / sqrt(rank)`` with standard-normal ``G`` (low rank)."""
    mean = mean_scale * rng.standard_normal(p)
    if rank == p:
        factor = scale * np.eye(p)
    else:
        factor = scale * rng.standard_normal((p, rank)) / math.sqrt(rank)
    return Gaussian(mean, factor)


def _sgd(opt: dict, lr: float, **over) -> SgdConfig:
    kw = dict(
        learning_rate=lr,
        steps=opt["steps"],
        momentum=opt["momentum"],
        nesterov=opt["nesterov"],
        batch_size=opt["batch_size"] or None,
        param_samples=opt["param_samples"],
        schedule=opt["schedule"],
        t0=opt["t0"],
        record_every=opt["record_every"],
    )
    kw.update(over)
    return SgdConfig(**kw)


def _auto_lr(opt: dict, bound: float) -> float:
    return opt["learning_rate"] if opt["learning_rate"] > 0 else opt["lr_factor"] / bound


def _null_deviation(null_basis: np.ndarray, theta: VariationalParams, theta0: VariationalParams) -> float:
    dm = np.linalg.norm(null_basis.T @ (theta.mu - theta0.mu))
    ds = np.linalg.norm(null_basis.T @ (theta.factor - theta0.factor))
    return float(max(dm, ds))


# -- regression implicit bias -----------------------------------------------------------


def run_regression_bias(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    dims, opt, par = cfg.dims, cfg.optimizer, cfg.params
    trace_t = ResultTable(
        "trace",
        ["replica", "rank", "variant", "step", "expected_loss", "residual_norm", "data_std_norm", "w2_to_prior", "null_deviation"],
        key=["replica", "variant", "step"],
    )
    summary = ResultTable(
        "summary",
        ["replica", "rank", "variant", "steps_run", "expected_loss", "w2_gap_to_oracle", "max_null_deviation"],
        key=["replica", "variant"],
    )

    def task(i):
        rng = np.random.default_rng(replica_seed(cfg.seed, i))
        rank = dims["ranks"][i % len(dims["ranks"])]
        prior = linear_prior(rng, dims["p"], rank, par["prior_scale"])
        prob, _ = generate_regression(replica_seed(cfg.seed, 10_000 + i), dims["n"], dims["p"], prior)
        oracle = regression_implicit_bias_solution(prob, prior)
        _, null = row_space_bases(prob.X)
        theta0 = prior.params()
        lr = _auto_lr(opt, gram_lambda_max(prob.X) / prob.sigma2)
        rows, sums = [], []
        for variant in par["variants"]:
            over = {}
            if variant == "sgd":
                over["batch_size"] = par["sgd_batch_size"]
            elif variant == "heavy-ball":
                over["momentum"] = par["heavy_ball_momentum"]
            elif variant != "gd":
                raise ValueError(f"unknown regression variant {variant!r}")
            sgd_cfg = _sgd(opt, lr, **over)

            def monitor(theta, t):
                return {
                    "expected_loss": expected_regression_loss(prob, theta),
                    "residual_norm": float(np.linalg.norm(prob.X @ theta.mu - prob.y)),
                    "data_std_norm": float(np.linalg.norm(prob.X @ theta.factor)),
                    "w2_to_prior": w2_squared(theta.gaussian(), prior),
                    "null_deviation": _null_deviation(null.basis, theta, theta0),
                }

            def stop(theta, t, loss):
                return expected_regression_loss(prob, theta) < par["stop_loss"]

            tr = sgd_run(regression_loss_grad(prob), theta0, sgd_cfg, replica_seed(cfg.seed, 20_000 + i),
                         n_data=prob.n, monitor=monitor, stop=stop)
            d = tr.diagnostics
            for k, t in enumerate(tr.steps):
                rows.append(dict(replica=i, rank=rank, variant=variant, step=t, **{key: d[key][k] for key in d}))
            sums.append(dict(
                replica=i, rank=rank, variant=variant, steps_run=tr.steps[-1],
                expected_loss=d["expected_loss"][-1],
                w2_gap_to_oracle=w2_squared(tr.final.gaussian(), oracle),
                max_null_deviation=max(d["null_deviation"]),
            ))
        return rows, sums

    for rows, sums in pool_map(task, range(cfg.replicas), threads):
        for r in rows:
            trace_t.add(**r)
        for s in sums:
            summary.add(**s)

    loss = summary.column("expected_loss")
    gap = summary.column("w2_gap_to_oracle")
    null_dev = summary.column("max_null_deviation")
    checks = [
        Check("expected_loss", bool(np.all(loss < par["loss_tol"])), f"max {loss.max():.3e} < {par['loss_tol']:g}"),
        Check("w2_gap_to_oracle", bool(np.all(gap < par["gap_tol"])), f"max {gap.max():.3e} < {par['gap_tol']:g}"),
        Check("null_space_conservation", bool(np.all(null_dev < par["null_tol"])), f"max {null_dev.max():.3e} < {par['null_tol']:g}"),
    ]
    return ExperimentResult({"trace": trace_t, "summary": summary}, checks)


# -- ensemble equivalence ---------------------------------------------------------------


def run_ensemble_equivalence(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    dims, opt, par = cfg.dims, cfg.optimizer, cfg.params
    rng = np.random.default_rng(replica_seed(cfg.seed, 0))
    prior = linear_prior(rng, dims["p"], dims["ranks"][0], par["prior_scale"])
    prob, _ = generate_regression(replica_seed(cfg.seed, 1), dims["n"], dims["p"], prior)
    oracle = regression_implicit_bias_solution(prob, prior)
    lr = _auto_lr(opt, gram_lambda_max(prob.X) / prob.sigma2)
    sgd_cfg = _sgd(opt, lr, keep_snapshots=False)
    p = dims["p"]

    def task(k):
        w0 = prior.mean + prior.factor @ np.random.default_rng(replica_seed(cfg.seed, 100 + k)).standard_normal(prior.rank)
        theta0 = VariationalParams(w0, np.zeros((p, 0)))

        def stop(theta, t, loss):
            return loss < par["stop_loss"]

        tr = sgd_run(regression_loss_grad(prob), theta0, sgd_cfg, replica_seed(cfg.seed, 200 + k), n_data=prob.n, stop=stop)
        w_t = tr.final.mu
        return k, tr.steps[-1], w_t, float(np.linalg.norm(w_t - ensemble_member_limit(prob, w0)))

    members = ResultTable("members", ["member", "steps_run", "distance_to_limit"], key=["member"])
    results = pool_map(task, range(cfg.replicas), threads)
    limits = np.array([r[2] for r in results])
    for k, steps_run, _, dist in results:
        members.add(member=k, steps_run=steps_run, distance_to_limit=dist)

    k_draws = limits.shape[0]
    mean_hat = limits.mean(axis=0)
    cov_hat = np.cov(limits, rowvar=False, ddof=1)
    cov = oracle.cov
    var = np.clip(np.diag(cov), 0.0, None)
    floor = 1e-9
    mean_se = np.sqrt(var / k_draws) + floor
    cov_se = np.sqrt((np.outer(var, var) + cov**2) / k_draws) + floor
    mean_z = np.abs(mean_hat - oracle.mean) / mean_se
    cov_z = np.abs(cov_hat - cov) / cov_se
    moments = ResultTable("moments", ["kind", "i", "j", "estimate", "oracle", "z_score"], key=["kind", "i", "j"])
    for i in range(p):
        moments.add(kind="mean", i=i, j=-1, estimate=mean_hat[i], oracle=oracle.mean[i], z_score=mean_z[i])
        for j in range(i, p):
            moments.add(kind="cov", i=i, j=j, estimate=cov_hat[i, j], oracle=cov[i, j], z_score=cov_z[i, j])
    dist = members.column("distance_to_limit")
    n_se = par["n_se"]
    iu = np.triu_indices(p)
    checks = [
        Check("member_limits", bool(np.all(dist < par["member_tol"])), f"max distance {dist.max():.3e}"),
        Check("ensemble_mean", bool(np.all(mean_z < n_se)), f"max z {mean_z.max():.2f} < {n_se:g}"),
        Check("ensemble_cov", bool(np.all(cov_z[iu] < n_se)), f"max z {cov_z[iu].max():.2f} < {n_se:g}"),
    ]
    return ExperimentResult({"members": members, "moments": moments}, checks)


# -- classification implicit bias -------------------------------------------------------


def run_classification_bias(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    dims, opt, par = cfg.dims, cfg.optimizer, cfg.params
    n, p = dims["n"], dims["p"]
    table = ResultTable(
        "summary",
        ["replica", "steps", "learning_rate", "n_support", "decay_exponent", "cosine", "support_var_ratio",
         "rescaled_w2_gap", "min_margin"],
        key=["replica"],
    )

    def task(i):
        prob = generate_classification(replica_seed(cfg.seed, i), n, p, par["margin_gap_min"], par["design"])
        rng = np.random.default_rng(replica_seed(cfg.seed, 1000 + i))
        scale = par["prior_scale"] if par["prior_scale"] > 0 else 1.0 / math.sqrt(p)
        prior = Gaussian(par["prior_mean_scale"] * rng.standard_normal(p), scale * np.eye(p))
        theta0 = prior.params()
        lr = _auto_lr(opt, loss_curvature_bound(prob, theta0))
        svm = hard_margin_svm(prob.X)
        xs = svm.support_rows
        alpha = np.sqrt(svm.dual_coeffs[svm.support_set])
        decay = float(np.linalg.eigvalsh(alpha[:, None] * (xs @ xs.T) * alpha[None, :]).min())
        tr = sgd_run(exponential_loss_grad(prob), theta0, _sgd(opt, lr, keep_snapshots=False),
                     replica_seed(cfg.seed, 2000 + i), n_data=n)
        th = tr.final
        cos = float(th.mu @ svm.w_hat / (np.linalg.norm(th.mu) * np.linalg.norm(svm.w_hat)))
        var0 = np.max(predictive_variance(prior, xs))
        var_t = np.max(predictive_variance(th.gaussian(), xs))
        oracle = classification_feasible_minimizer(prob, prior)
        gap = w2_squared(rescaled_iterates(tr, prob, prior)[-1].gaussian(), oracle)
        return dict(replica=i, steps=tr.steps[-1], learning_rate=lr, n_support=len(svm.support_set),
                    decay_exponent=decay, cosine=cos, support_var_ratio=float(var_t / var0),
                    rescaled_w2_gap=gap, min_margin=float(np.min(prob.X @ th.mu)))

    for row in pool_map(task, range(cfg.replicas), threads):
        table.add(**row)
    cos, vr, gap = table.column("cosine"), table.column("support_var_ratio"), table.column("rescaled_w2_gap")
    checks = [
        Check("cosine", bool(np.all(cos > par["cos_tol"])), f"{int(np.sum(cos > par['cos_tol']))}/{cos.size} above {par['cos_tol']:g}, min {cos.min():.4f}"),
        Check("support_variance", bool(np.all(vr < par["var_ratio_tol"])), f"{int(np.sum(vr < par['var_ratio_tol']))}/{vr.size} below {par['var_ratio_tol']:g}, max {vr.max():.2e}"),
        Check("rescaled_limit", bool(np.all(gap < par["gap_tol"])), f"{int(np.sum(gap < par['gap_tol']))}/{gap.size} below {par['gap_tol']:g}, max {gap.max():.3e}"),
    ]
    return ExperimentResult({"summary": table}, checks)


# -- error identity ---------------------------------------------------------------------


class _MeanStack:
    """Means of many regression runs (one column per prior draw) plus one shared factor."""

    def __init__(self, mus: np.ndarray, factor: np.ndarray):
        self.mus, self.factor = mus, factor

    def as_arrays(self):
        return [self.mus, self.factor]

    def with_arrays(self, arrays):
        return _MeanStack(arrays[0], arrays[1])


def _error_rows(x_test, mus, w, factor):
    err = x_test @ mus - x_test @ w  # (points, draws)
    sq = err**2
    mc = sq.mean(axis=1)
    se = sq.std(axis=1, ddof=1) / math.sqrt(sq.shape[1])
    pv = np.sum((x_test @ factor) ** 2, axis=1)
    return mc, se, pv


def run_error_identity(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    dims, opt, par = cfg.dims, cfg.optimizer, cfg.params
    n, p = dims["n"], dims["p"]
    rng = np.random.default_rng(replica_seed(cfg.seed, 0))
    prior = linear_prior(rng, p, dims["ranks"][0], par["prior_scale"])
    prob, _ = generate_regression(replica_seed(cfg.seed, 1), n, p, prior)
    x, s2 = prob.X, prob.sigma2
    draws = par["draws"]
    w = prior.mean[:, None] + prior.factor @ rng.standard_normal((prior.rank, draws))
    y = x @ w
    x_test = rng.standard_normal((par["test_points"], p))
    table = ResultTable(
        "identity",
        ["dynamics", "time", "point", "mc_squared_error", "mc_standard_error", "predictive_variance", "z_score"],
        key=["dynamics", "time", "point"],
    )

    check_steps = sorted(set(par["check_steps"]))
    lr = _auto_lr(opt, gram_lambda_max(x) / s2)
    steps = max(check_steps)

    def loss_grad(theta, batch, noise):
        xb = x[batch]
        resid = xb @ theta.mus - y[batch]
        xs = xb @ theta.factor
        loss = (np.sum(resid**2) / draws + np.sum(xs**2)) / (2.0 * s2)
        return loss, (xb.T @ resid / s2, xb.T @ xs / s2)

    snapshots = {}

    def monitor(theta, t):
        if t in check_steps:
            snapshots[t] = (theta.mus.copy(), theta.factor.copy())
        return None

    theta0 = _MeanStack(np.repeat(prior.mean[:, None], draws, axis=1), prior.factor.copy())
    sgd_run(loss_grad, theta0, _sgd(opt, lr, steps=steps, record_every=1, keep_snapshots=False),
            replica_seed(cfg.seed, 2), n_data=n, monitor=monitor)
    for t in check_steps:
        mus, factor = snapshots[t]
        for j, (mc, se, pv) in enumerate(zip(*_error_rows(x_test, mus, w, factor))):
            table.add(dynamics="sgd", time=float(t), point=j, mc_squared_error=mc, mc_standard_error=se,
                      predictive_variance=pv, z_score=abs(mc - pv) / se)

    times = sorted(set(par["flow_times"]))
    theta_init = prior.params()
    flows = [gradient_flow_regression(RegressionProblem(x, y[:, k], s2), theta_init, times) for k in range(draws)]
    for ti, t in enumerate(times):
        mus = np.stack([flows[k][ti].mu for k in range(draws)], axis=1)
        factor = flows[0][ti].factor
        for j, (mc, se, pv) in enumerate(zip(*_error_rows(x_test, mus, w, factor))):
            table.add(dynamics="gradient-flow", time=float(t), point=j, mc_squared_error=mc, mc_standard_error=se,
                      predictive_variance=pv, z_score=abs(mc - pv) / se)

    z = table.column("z_score")
    checks = [Check("error_identity", bool(np.all(z < par["n_se"])), f"max z {z.max():.2f} < {par['n_se']:g}")]
    return ExperimentResult({"identity": table}, checks)


# -- monotone uncertainty -------------------------------------------------------------


def run_monotone_uncertainty(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    dims, opt, par = cfg.dims, cfg.optimizer, cfg.params
    table = ResultTable(
        "summary",
        ["replica", "run", "learning_rate", "steps", "trace_initial", "trace_final", "max_increase"],
        key=["replica", "run"],
    )

    def trace_run(prob, theta0, sgd_cfg, seed):
        traces = []

        def monitor(theta, t):
            traces.append(float(np.sum(theta.factor**2)))
            return None

        try:
            sgd_run(regression_loss_grad(prob), theta0, sgd_cfg, seed, n_data=prob.n, monitor=monitor)
        except TrainingDivergedError as exc:
            log.debug("counterexample run stopped: %s", exc)
        tr = np.array(traces)
        inc = float(np.max(np.diff(tr))) if tr.size > 1 else 0.0
        return tr, inc

    def task(i):
        rng = np.random.default_rng(replica_seed(cfg.seed, i))
        prior = linear_prior(rng, dims["p"], dims["ranks"][0], par["prior_scale"])
        prob, _ = generate_regression(replica_seed(cfg.seed, 1000 + i), dims["n"], dims["p"], prior)
        lam = gram_lambda_max(prob.X) / prob.sigma2
        lr = _auto_lr(opt, lam)
        tr, inc = trace_run(prob, prior.params(), _sgd(opt, lr, record_every=1, keep_snapshots=False),
                            replica_seed(cfg.seed, 2000 + i))
        rows = [dict(replica=i, run="bounded", learning_rate=lr, steps=len(tr) - 1, trace_initial=tr[0],
                     trace_final=tr[-1], max_increase=inc)]
        bad_lr = par["counter_factor"] / lam
        tr_bad, inc_bad = trace_run(
            prob, prior.params(),
            _sgd(opt, bad_lr, steps=par["counter_steps"], batch_size=None, record_every=1, keep_snapshots=False),
            replica_seed(cfg.seed, 3000 + i),
        )
        rows.append(dict(replica=i, run="counterexample", learning_rate=bad_lr, steps=len(tr_bad) - 1,
                         trace_initial=tr_bad[0], trace_final=tr_bad[-1], max_increase=inc_bad))
        return rows

    for rows in pool_map(task, range(cfg.replicas), threads):
        for r in rows:
            table.add(**r)
    good = np.array([r["max_increase"] for r in table.where(run="bounded")])
    bad = np.array([r["max_increase"] for r in table.where(run="counterexample")])
    checks = [
        Check("monotone_trace", bool(np.all(good <= par["tol"])), f"max increase {good.max():.3e} <= {par['tol']:g}"),
        Check("counterexample_violates", bool(np.any(bad > par["tol"])), f"max increase {bad.max():.3e}"),
    ]
    return ExperimentResult({"summary": table}, checks)


# -- variational networks -------------------------------------------------------------


def _net_setup(widths, probabilistic, ranks, kind="SP", covariance="lowrank", activation="relu"):
    specs = mlp_specs(list(widths), list(probabilistic), list(ranks), covariance=covariance, activation=activation)
    n_layers = len(specs)
    spec = ParametrizationSpec.mup(n_layers) if kind == "muP" else ParametrizationSpec.standard(n_layers)
    specs = apply_forward_mults(spec, specs)
    return spec, specs


def _eval_expected_loss(net, specs, x, y, draws, sigma2=1.0) -> float:
    out = predictive_samples(net, specs, x, draws)  # (M, N, 1)
    return float(np.mean((out - y[None]) ** 2) / (2.0 * sigma2))


def with_constant(x: np.ndarray) -> np.ndarray:
    """Append a constant-one input feature, which acts as a first-layer bias for the biasless nets."""
    return np.hstack([x, np.ones((x.shape[0], 1))])


def _sine_task(seed: int, n: int):
    rng = np.random.default_rng(seed)
    x = rng.uniform(-1.0, 1.0, (n, 1))
    return with_constant(x), np.sin(3.0 * x)


def run_samples_vs_lr(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    dims, opt, par = cfg.dims, cfg.optimizer, cfg.params
    x, y = _sine_task(replica_seed(cfg.seed, 0), dims["n"])
    table = ResultTable(
        "final_loss",
        ["replica", "param_samples", "learning_rate", "steps", "final_expected_loss"],
        key=["replica", "param_samples"],
    )
    ratio = par["sample_ratio"]

    def task(i):
        spec, specs = _net_setup(dims["widths"], par["probabilistic"], dims["ranks"], cfg.get("parametrization", "kind"))
        net0 = init_net(spec, specs, replica_seed(cfg.seed, 100 + i))
        mults = lr_multipliers(derive_scaling(spec, specs))
        draws = np.random.default_rng(replica_seed(cfg.seed, 200 + i)).standard_normal((par["eval_samples"], noise_dim(specs)))
        rows = []
        settings = [(opt["param_samples"], opt["learning_rate"], opt["steps"]),
                    (max(1, opt["param_samples"] // ratio), opt["learning_rate"] / ratio, opt["steps"] * ratio)]
        for m, lr, steps in settings:
            sgd_cfg = _sgd(opt, lr, steps=steps, param_samples=m, record_every=steps, keep_snapshots=False)
            tr = sgd_run(squared_error_loss_grad(specs, x, y), net0, sgd_cfg, replica_seed(cfg.seed, 300 + i),
                         n_data=dims["n"], noise_dim=noise_dim(specs), lr_multipliers=mults)
            rows.append(dict(replica=i, param_samples=m, learning_rate=lr, steps=steps,
                             final_expected_loss=_eval_expected_loss(tr.final, specs, x, y, draws)))
        return rows

    for rows in pool_map(task, range(cfg.replicas), threads):
        for r in rows:
            table.add(**r)
    rel = []
    for i in range(cfg.replicas):
        rs = table.where(replica=i)
        many = max(rs, key=lambda r: r["param_samples"])["final_expected_loss"]
        few = min(rs, key=lambda r: r["param_samples"])["final_expected_loss"]
        rel.append(abs(few - many) / many)
    rel = np.array(rel)
    checks = [Check("loss_match", bool(np.all(rel <= par["rel_tol"])), f"max relative difference {rel.max():.3f} <= {par['rel_tol']:g}")]
    return ExperimentResult({"final_loss": table}, checks)


def coord_check_run(kind: str, width: int, seed: int, cfg: ExperimentConfig):
    """Train on the single observation (1, 1) and return (Delta m1, Delta m2, init m1, init m2) RMSEs per layer.

    A diverged run reports infinite Delta RMSEs.
    """
    opt, par = cfg.optimizer, cfg.params
    widths = [1, width, width, 1]
    ranks = [widths[i] * widths[i + 1] for i in range(3)]
    spec, specs = _net_setup(widths, par["probabilistic"], ranks, kind)
    net0 = init_net(spec, specs, seed)
    mults = lr_multipliers(derive_scaling(spec, specs))
    x = np.ones((1, 1))
    y = np.ones((1, 1))
    sgd_cfg = _sgd(opt, opt["learning_rate"], record_every=max(opt["steps"], 1), keep_snapshots=False, batch_size=None)
    try:
        tr = sgd_run(squared_error_loss_grad(specs, x, y), net0, sgd_cfg, seed, n_data=1,
                     noise_dim=noise_dim(specs), lr_multipliers=mults)
    except TrainingDivergedError as exc:
        log.info("coord-check %s width %d diverged: %s", kind, width, exc)
        fs0 = feature_stats(net0, net0, specs, x, par["n_noise"], seed + 1)
        inf = [math.inf] * len(specs)
        return inf, inf, fs0.init_rmse(1), fs0.init_rmse(2)
    fs = feature_stats(net0, tr.final, specs, x, par["n_noise"], seed + 1)
    return fs.delta_rmse(1), fs.delta_rmse(2), fs.init_rmse(1), fs.init_rmse(2)


def _ratio(num: float, den: float) -> float:
    """``num / den`` with diverged (infinite) or zero entries mapped to inf / nan explicitly."""
    if math.isinf(num) and math.isinf(den):
        return float("nan")
    if math.isinf(num) or den == 0:
        return float("inf") if num > 0 else float("nan")
    return float(num / den)


def run_coord_check(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    par = cfg.params
    widths = sorted(cfg.dims["widths"])
    table = ResultTable(
        "features",
        ["kind", "width", "seed", "layer", "diverged", "delta_m1_rmse", "delta_m2_rmse", "init_m1_rmse", "init_m2_rmse"],
        key=["kind", "width", "seed", "layer"],
    )
    tasks = [(k, w, s) for k in par["kinds"] for w in widths for s in range(cfg.replicas)]

    def task(item):
        kind, width, s = item
        return item, coord_check_run(kind, width, replica_seed(cfg.seed, s), cfg)

    for (kind, width, s), (d1, d2, i1, i2) in pool_map(task, tasks, threads):
        for layer in range(len(d1)):
            table.add(kind=kind, width=width, seed=s, layer=layer, diverged=math.isinf(d1[layer]),
                      delta_m1_rmse=d1[layer], delta_m2_rmse=d2[layer],
                      init_m1_rmse=i1[layer], init_m2_rmse=i2[layer])

    ratios = ResultTable("ratios", ["kind", "layer", "moment", "width_from", "width_to", "ratio"],
                         key=["kind", "layer", "moment", "width_from"])
    n_layers = 3
    for kind in par["kinds"]:
        for layer in range(n_layers):
            for moment in (1, 2):
                col = f"delta_m{moment}_rmse"
                means = [np.mean([r[col] for r in table.where(kind=kind, width=w, layer=layer)]) for w in widths]
                for a, b, ma, mb in zip(widths, widths[1:], means, means[1:]):
                    ratios.add(kind=kind, layer=layer, moment=moment, width_from=a, width_to=b, ratio=_ratio(mb, ma))
    lo, hi = par["band_low"], par["band_high"]

    def in_band(r):
        # nan (both widths diverged) counts as outside the band
        return lo <= r["ratio"] <= hi

    checks = []
    if "muP" in par["kinds"]:
        rs = ratios.where(kind="muP")
        bad = [r for r in rs if not in_band(r)]
        where = "; ".join(f"layer {r['layer']} m{r['moment']} {r['width_from']}->{r['width_to']}: {r['ratio']:.3f}" for r in bad)
        checks.append(Check("muP_stable", not bad, f"{len(rs) - len(bad)}/{len(rs)} ratios in [{lo:g}, {hi:g}]" + (f"; outside: {where}" if bad else "")))
    if "SP" in par["kinds"]:
        out_sp = [r for r in ratios.where(kind="SP", layer=n_layers - 1) if not in_band(r)]
        checks.append(Check("SP_output_unstable", bool(out_sp), f"{len(out_sp)} output-layer ratios outside the band"))
    return ExperimentResult({"features": table, "ratios": ratios}, checks)


def run_lr_transfer(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    dims, opt, par = cfg.dims, cfg.optimizer, cfg.params
    x, y = _sine_task(replica_seed(cfg.seed, 0), dims["n"])
    table = ResultTable("sweep", ["kind", "width", "log2_lr", "replica", "final_expected_loss"],
                        key=["kind", "width", "log2_lr", "replica"])
    tasks = [(k, w, lr, r) for k in par["kinds"] for w in dims["widths"] for lr in par["log2_lrs"] for r in range(cfg.replicas)]

    def task(item):
        kind, width, log2_lr, r = item
        rank = dims["ranks"][0]
        spec, specs = _net_setup([2, width, width, 1], [False, False, True], [0, 0, min(rank, width)], kind)
        net0 = init_net(spec, specs, replica_seed(cfg.seed, 100 + r))
        mults = lr_multipliers(derive_scaling(spec, specs))
        sgd_cfg = _sgd(opt, 2.0**log2_lr, keep_snapshots=False)
        try:
            tr = sgd_run(squared_error_loss_grad(specs, x, y), net0, sgd_cfg, replica_seed(cfg.seed, 200 + r),
                         n_data=dims["n"], noise_dim=noise_dim(specs), lr_multipliers=mults)
            draws = np.random.default_rng(replica_seed(cfg.seed, 300 + r)).standard_normal((par["eval_samples"], noise_dim(specs)))
            loss = _eval_expected_loss(tr.final, specs, x, y, draws)
        except TrainingDivergedError:
            loss = float("nan")
        return dict(kind=kind, width=width, log2_lr=log2_lr, replica=r, final_expected_loss=loss)

    for row in pool_map(task, tasks, threads):
        table.add(**row)
    best = ResultTable("best_lr", ["kind", "width", "best_log2_lr", "mean_loss"], key=["kind", "width"])
    for kind in par["kinds"]:
        for width in dims["widths"]:
            scores = []
            for lr in par["log2_lrs"]:
                vals = [r["final_expected_loss"] for r in table.where(kind=kind, width=width, log2_lr=lr)]
                m = float(np.mean(vals))
                scores.append((math.inf if math.isnan(m) else m, lr))
            m, lr = min(scores)
            best.add(kind=kind, width=width, best_log2_lr=lr, mean_loss=m if math.isfinite(m) else float("nan"))
    return ExperimentResult({"sweep": table, "best_lr": best}, [])


# -- objective comparisons -----------------------------------------------------------


def run_gvi_compare(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    dims, opt, par = cfg.dims, cfg.optimizer, cfg.params
    rng = np.random.default_rng(replica_seed(cfg.seed, 0))
    p = dims["p"]
    prior = Gaussian(rng.standard_normal(p), par["prior_scale"] * np.eye(p))
    prob, _ = generate_regression(replica_seed(cfg.seed, 1), dims["n"], p, prior)
    oracle = regression_implicit_bias_solution(prob, prior)
    table = ResultTable("lambda_sweep", ["lam", "steps_run", "objective", "expected_loss", "w2_to_oracle"], key=["lam"])

    def task(lam):
        spec = ObjectiveSpec("gvi_w2", lam, prior)
        lr = _auto_lr(opt, gram_lambda_max(prob.X) / prob.sigma2 + 2.0 * lam)
        loss_grad = regularized_loss_grad(spec, regression_loss_grad(prob))

        def stop(theta, t, loss):
            _, (gm, gf) = loss_grad(theta, np.arange(prob.n), None)
            return math.sqrt(np.sum(gm**2) + np.sum(gf**2)) < par["stop_grad"]

        tr = sgd_run(loss_grad, prior.params(), _sgd(opt, lr, keep_snapshots=False), replica_seed(cfg.seed, 2),
                     n_data=prob.n, stop=stop)
        th = tr.final
        return dict(lam=lam, steps_run=tr.steps[-1], objective=tr.losses[-1],
                    expected_loss=expected_regression_loss(prob, th),
                    w2_to_oracle=math.sqrt(max(w2_squared(th.gaussian(), oracle), 0.0)))

    for row in pool_map(task, par["lambdas"], threads):
        table.add(**row)
    by_lam = sorted(table.where(), key=lambda r: -r["lam"])
    dists = [r["w2_to_oracle"] for r in by_lam]
    mono = all(b < a for a, b in zip(dists, dists[1:]))
    checks = [Check("gvi_approaches_oracle", mono, "W2 to oracle along decreasing lambda: " + " > ".join(f"{d:.3e}" for d in dists))]
    return ExperimentResult({"lambda_sweep": table}, checks)


def _elbo_loss_grad(specs, x, y, noise_var, lam, prior_stds):
    data_term = squared_error_loss_grad(specs, x, y, sigma2=noise_var, reduction="sum")

    def loss_grad(net, batch, noise):
        loss, grads = data_term(net, batch, noise)
        kl, kl_grads = mean_field_kl(net, prior_stds)
        return loss + lam * kl, [g + lam * k for g, k in zip(grads, kl_grads)]

    return loss_grad


def run_toy_demo(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    dims, opt, par = cfg.dims, cfg.optimizer, cfg.params
    x1, y = toy_regression(replica_seed(cfg.seed, 0), dims["n"])
    x = with_constant(x1)
    grid = with_constant(np.linspace(par["grid_low"], par["grid_high"], par["grid_points"])[:, None])
    pred = ResultTable("predictive", ["objective", "x", "mean", "std", "q05", "q25", "q50", "q75", "q95"], key=["objective", "x"])
    train = ResultTable("train_points", ["objective", "point", "x", "y", "prior_std", "std", "std_ratio"], key=["objective", "point"])
    probabilistic = [r > 0 for r in dims["ranks"]]

    def task(objective):
        covariance = "diagonal" if objective == "elbo_kl" else "lowrank"
        spec, specs = _net_setup(dims["widths"], probabilistic, dims["ranks"], cfg.get("parametrization", "kind"), covariance, par["activation"])
        scalings = derive_scaling(spec, specs)
        net0 = init_net(spec, specs, replica_seed(cfg.seed, 1))
        mults = lr_multipliers(scalings)
        if objective == "expected_loss":
            loss_grad = squared_error_loss_grad(specs, x, y, sigma2=par["noise_var"], reduction="sum")
        elif objective == "elbo_kl":
            loss_grad = _elbo_loss_grad(specs, x, y, par["noise_var"], par["elbo_lambda"], [s.factor_init_std for s in scalings])
        else:
            raise ValueError(f"toy-demo supports expected_loss and elbo_kl, not {objective!r}")
        lr = par["elbo_learning_rate"] if objective == "elbo_kl" else opt["learning_rate"]
        tr = sgd_run(loss_grad, net0, _sgd(opt, lr, keep_snapshots=False, batch_size=None),
                     replica_seed(cfg.seed, 2), n_data=x.shape[0], noise_dim=noise_dim(specs), lr_multipliers=mults)
        net = tr.final
        draws = np.random.default_rng(replica_seed(cfg.seed, 3)).standard_normal((par["quantile_samples"], noise_dim(specs)))
        f_train0 = predictive_samples(net0, specs, x, draws)[:, :, 0]
        f_train = predictive_samples(net, specs, x, draws)[:, :, 0]
        f_grid = predictive_samples(net, specs, grid, draws)[:, :, 0]
        rows_t = [dict(objective=objective, point=n, x=float(x[n, 0]), y=float(y[n, 0]), prior_std=float(f_train0[:, n].std()),
                       std=float(f_train[:, n].std()), std_ratio=float(f_train[:, n].std() / f_train0[:, n].std()))
                  for n in range(x.shape[0])]
        qs = np.quantile(f_grid, [0.05, 0.25, 0.5, 0.75, 0.95], axis=0)
        rows_p = [dict(objective=objective, x=float(grid[g, 0]), mean=float(f_grid[:, g].mean()), std=float(f_grid[:, g].std()),
                       q05=qs[0, g], q25=qs[1, g], q50=qs[2, g], q75=qs[3, g], q95=qs[4, g]) for g in range(grid.shape[0])]
        return rows_t, rows_p

    for rows_t, rows_p in pool_map(task, par["objectives"], threads):
        for r in rows_t:
            train.add(**r)
        for r in rows_p:
            pred.add(**r)
    checks = []
    if "expected_loss" in par["objectives"]:
        ratios = np.array([r["std_ratio"] for r in train.where(objective="expected_loss")])
        checks.append(Check("ibvi_collapses", bool(ratios.max() < par["ibvi_ratio_max"]), f"max std ratio {ratios.max():.3e} < {par['ibvi_ratio_max']:g}"))
    if "elbo_kl" in par["objectives"]:
        ratios = np.array([r["std_ratio"] for r in train.where(objective="elbo_kl")])
        checks.append(Check("elbo_keeps_uncertainty", bool(ratios.min() > par["elbo_ratio_min"]), f"min std ratio {ratios.min():.3e} > {par['elbo_ratio_min']:g}"))
    return ExperimentResult({"predictive": pred, "train_points": train}, checks)


RUNNERS = {
    "regression-bias": run_regression_bias,
    "classification-bias": run_classification_bias,
    "ensemble-equivalence": run_ensemble_equivalence,
    "error-identity": run_error_identity,
    "monotone-uncertainty": run_monotone_uncertainty,
    "samples-vs-lr": run_samples_vs_lr,
    "coord-check": run_coord_check,
    "lr-transfer": run_lr_transfer,
    "gvi-compare": run_gvi_compare,
    "toy-demo": run_toy_demo,
}


def run(cfg: ExperimentConfig, threads: int = 1) -> ExperimentResult:
    """Run the configured experiment and return its tables and acceptance checks."""
    try:
        runner = RUNNERS[cfg.experiment]
    except KeyError:
        raise ValueError(f"unknown experiment {cfg.experiment!r}") from None
    cfg.validate()
    return runner(cfg, threads)
