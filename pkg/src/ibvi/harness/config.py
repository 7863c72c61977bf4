"""INI-style experiment configuration with per-experiment typed defaults.

A config file holds sections ``[run]``, ``[dims]``, ``[optimizer]``,
``[parametrization]`` and ``[params]``; every key must already exist in the
experiment's defaults, whose Python type decides how the string is parsed.
Command-line overrides use ``section.key=value``.
"""

from __future__ import annotations

import configparser
import copy
import io
import math
from dataclasses import dataclass

EXPERIMENTS = (
    "regression-bias",
    "classification-bias",
    "ensemble-equivalence",
    "error-identity",
    "monotone-uncertainty",
    "samples-vs-lr",
    "coord-check",
    "lr-transfer",
    "gvi-compare",
    "toy-demo",
)

SECTIONS = ("run", "dims", "optimizer", "parametrization", "params")


class ConfigError(ValueError):
    pass


def _base() -> dict:
    return {
        "run": {"seed": 0, "replicas": 1, "output_dir": "results"},
        "dims": {"n": 8, "p": 24, "ranks": [4, 24], "widths": [2, 32, 32, 1]},
        "optimizer": {
            # learning_rate = 0 means "lr_factor / curvature bound" where the experiment defines one
            "learning_rate": 0.0,
            "lr_factor": 0.9,
            "steps": 1000,
            "momentum": 0.0,
            "nesterov": False,
            "batch_size": 0,
            "param_samples": 1,
            "schedule": "constant",
            "t0": 1.0,
            "record_every": 1,
        },
        "parametrization": {"kind": "SP", "global_lr": 1.0, "rank_correction": True},
        "params": {},
    }


def _defaults(experiment: str) -> dict:
    d = _base()
    run, dims, opt, par = d["run"], d["dims"], d["optimizer"], d["params"]
    if experiment == "regression-bias":
        run["replicas"] = 20
        opt.update(steps=50000, record_every=50)
        par.update(
            variants=["gd", "sgd", "heavy-ball"],
            sgd_batch_size=2,
            heavy_ball_momentum=0.9,
            prior_scale=1.0,
            stop_loss=1e-15,
            loss_tol=1e-12,
            gap_tol=1e-6,
            null_tol=1e-8,
        )
    elif experiment == "ensemble-equivalence":
        run["replicas"] = 100
        dims["ranks"] = [24]
        opt.update(steps=50000, record_every=50)
        par.update(prior_scale=1.0, stop_loss=1e-20, member_tol=1e-6, n_se=4.0)
    elif experiment == "classification-bias":
        run["replicas"] = 10
        dims.update(n=6, p=18, ranks=[18])
        opt.update(lr_factor=0.5, steps=200000, record_every=200000)
        par.update(
            prior_scale=0.0,  # 0: 1 / sqrt(P), so that x^T Sigma_0 x is of order one
            prior_mean_scale=0.0,
            margin_gap_min=0.05,
            design="gaussian",
            cos_tol=0.995,
            var_ratio_tol=1e-3,
            gap_tol=5e-2,
        )
    elif experiment == "error-identity":
        dims["ranks"] = [24]
        opt.update(steps=1000, batch_size=2)
        par.update(
            draws=2000,
            test_points=5,
            check_steps=[0, 10, 100, 1000],
            flow_times=[0.0, 0.1, 1.0, 10.0],
            prior_scale=1.0,
            n_se=4.0,
        )
    elif experiment == "monotone-uncertainty":
        run["replicas"] = 10
        dims["ranks"] = [24]
        opt.update(lr_factor=1.0, steps=10000, batch_size=2)
        par.update(prior_scale=1.0, tol=1e-12, counter_factor=3.0, counter_steps=20)
    elif experiment == "samples-vs-lr":
        run["replicas"] = 3
        dims.update(n=16, widths=[2, 32, 32, 1], ranks=[8, 8, 8])
        opt.update(learning_rate=0.05, steps=1500, param_samples=8, record_every=1500)
        par.update(sample_ratio=8, eval_samples=2000, probabilistic=[True, True, True], rel_tol=0.10)
    elif experiment == "coord-check":
        run["replicas"] = 5
        dims.update(widths=[8, 16, 32, 64])
        opt.update(learning_rate=0.05, steps=5)
        par.update(kinds=["SP", "muP"], n_noise=1000, probabilistic=[True, True, True], band_low=0.5, band_high=2.0)
    elif experiment == "lr-transfer":
        run["replicas"] = 2
        dims.update(n=16, widths=[16, 32, 64, 128, 256], ranks=[4])
        opt.update(steps=300, record_every=300)
        par.update(kinds=["SP", "muP"], log2_lrs=[-10.0, -8.0, -6.0, -4.0, -2.0, 0.0], eval_samples=200)
    elif experiment == "gvi-compare":
        dims["ranks"] = [24]
        opt.update(steps=100000, record_every=1000)
        par.update(lambdas=[1.0, 0.1, 0.01], prior_scale=1.0, stop_grad=1e-11)
    elif experiment == "toy-demo":
        dims.update(n=8, widths=[2, 32, 32, 1], ranks=[0, 32, 32])
        d["parametrization"]["kind"] = "muP"
        opt.update(learning_rate=0.01, steps=100000, record_every=100000)
        par.update(
            objectives=["expected_loss", "elbo_kl"],
            activation="tanh",
            elbo_lambda=1.0,
            elbo_learning_rate=0.001,
            noise_var=0.05,
            grid_points=101,
            grid_low=-2.0,
            grid_high=2.0,
            quantile_samples=2000,
            ibvi_ratio_max=0.05,
            elbo_ratio_min=0.2,
        )
    else:
        raise ConfigError(f"unknown experiment {experiment!r}; choose from {', '.join(EXPERIMENTS)}")
    return d


def _parse(raw: str, like, key: str):
    raw = raw.strip()
    try:
        if isinstance(like, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
        if isinstance(like, list):
            items = [s for s in (t.strip() for t in raw.split(",")) if s]
            elem = like[0] if like else ""
            return [_parse(s, elem, key) for s in items]
        return raw
    except ValueError as exc:
        raise ConfigError(f"cannot parse {key}={raw!r} as {type(like).__name__}") from exc


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class ExperimentConfig:
    experiment: str
    sections: dict

    def get(self, section: str, key: str):
        return self.sections[section][key]

    @property
    def seed(self) -> int:
        return self.sections["run"]["seed"]

    @property
    def replicas(self) -> int:
        return self.sections["run"]["replicas"]

    @property
    def dims(self) -> dict:
        return self.sections["dims"]

    @property
    def optimizer(self) -> dict:
        return self.sections["optimizer"]

    @property
    def params(self) -> dict:
        return self.sections["params"]

    def set(self, dotted: str, raw: str) -> None:
        section, _, key = dotted.partition(".")
        if not key:
            raise ConfigError(f"override {dotted!r} must look like section.key")
        self._assign(section, key, raw)

    def _assign(self, section: str, key: str, raw: str):
        if section not in self.sections:
            raise ConfigError(f"unknown section [{section}]")
        if key not in self.sections[section]:
            raise ConfigError(f"unknown key {key!r} in [{section}] for {self.experiment}")
        self.sections[section][key] = _parse(raw, self.sections[section][key], f"{section}.{key}")

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        cp["experiment"] = {"name": self.experiment}
        for name in SECTIONS:
            cp[name] = {k: _format(v) for k, v in self.sections[name].items()}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def validate(self) -> None:
        run, dims, opt = self.sections["run"], self.dims, self.optimizer
        if run["replicas"] < 1:
            raise ConfigError("replicas must be >= 1")
        if dims["n"] < 1 or dims["p"] < 1:
            raise ConfigError("dims.n and dims.p must be positive")
        if self.experiment in ("regression-bias", "ensemble-equivalence", "classification-bias",
                               "error-identity", "monotone-uncertainty", "gvi-compare"):
            if not dims["p"] > dims["n"]:
                raise ConfigError(f"{self.experiment} needs an overparametrized model (p > n)")
            if any(r < 1 or r > dims["p"] for r in dims["ranks"]):
                raise ConfigError("ranks must lie in [1, p]")
        if any(w < 1 for w in dims["widths"]):
            raise ConfigError("widths must be positive")
        if opt["steps"] < 0 or opt["record_every"] < 1:
            raise ConfigError("invalid optimizer steps / record_every")
        if opt["learning_rate"] < 0 or not math.isfinite(opt["learning_rate"]):
            raise ConfigError("learning_rate must be finite and >= 0 (0 selects the automatic rate)")
        if opt["batch_size"] < 0 or opt["batch_size"] > dims["n"]:
            raise ConfigError("batch_size must lie in [0, n] (0 selects full batch)")
        if not 0.0 <= opt["momentum"] < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")


def default_config(experiment: str) -> ExperimentConfig:
    return ExperimentConfig(experiment, copy.deepcopy(_defaults(experiment)))


def load_config(experiment: str, path: str | None = None, overrides=()) -> ExperimentConfig:
    """Defaults for ``experiment``, updated by the INI file at ``path`` and then by overrides."""
    cfg = default_config(experiment)
    if path is not None:
        cp = configparser.ConfigParser()
        cp.optionxform = str
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
        for section in cp.sections():
            if section == "experiment":
                name = cp[section].get("name")
                if name is not None and name != experiment:
                    raise ConfigError(f"config file is for {name!r}, not {experiment!r}")
                continue
            for key, raw in cp[section].items():
                cfg._assign(section, key, raw)
    for item in overrides:
        dotted, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        cfg.set(dotted.strip(), raw)
    cfg.validate()
    return cfg
