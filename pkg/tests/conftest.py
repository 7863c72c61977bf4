"""Shared helpers: finite differences, Monte-Carlo standard-error checks, random instances."""

import numpy as np
import pytest

from ibvi.gaussian import Gaussian, VariationalParams
from ibvi.numerics import numerical_rank


def central_diff(f, arrays, h=1e-6):
    """Central-difference gradient of scalar ``f(arrays)`` w.r.t. every entry of every array."""
    arrays = [np.array(a, dtype=float, copy=True) for a in arrays]
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        flat, gflat = a.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            up = f(arrays)
            flat[i] = old - h
            down = f(arrays)
            flat[i] = old
            gflat[i] = (up - down) / (2.0 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    """``||a - n|| / ||n||`` over a list of arrays (absolute when the numeric gradient vanishes)."""
    a = np.concatenate([np.ravel(x) for x in analytic])
    n = np.concatenate([np.ravel(x) for x in numeric])
    scale = np.linalg.norm(n)
    return float(np.linalg.norm(a - n) / (scale if scale > 1e-12 else 1.0))


def assert_within_se(samples, target, k=3.0):
    """Mean of ``samples`` (axis 0) agrees with ``target`` within ``k`` standard errors."""
    samples = np.asarray(samples, dtype=float)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / np.sqrt(samples.shape[0])
    z = np.abs(mean - target) / np.maximum(se, 1e-300)
    assert np.all(z < k), f"max z-score {np.max(z):.2f} (mean {mean}, target {target})"


def full_row_rank(rng, n, p):
    while True:
        x = rng.standard_normal((n, p))
        if numerical_rank(np.linalg.svd(x, compute_uv=False)) == n:
            return x


def random_theta(rng, p, r, scale=1.0):
    return VariationalParams(scale * rng.standard_normal(p), scale * rng.standard_normal((p, r)))


def random_gaussian(rng, p, r, scale=1.0):
    return Gaussian(scale * rng.standard_normal(p), scale * rng.standard_normal((p, r)))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance report ----------------------------------------------------------

ACCEPTANCE_RESULTS = {}


def record_acceptance(number, passed, detail):
    """Store one acceptance verdict; the terminal summary prints all of them in order."""
    line = f"CRITERION {number:2d} {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_RESULTS[number] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_RESULTS:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_RESULTS):
            terminalreporter.write_line(ACCEPTANCE_RESULTS[number])
