import numpy as np
import pytest

from conftest import central_diff, full_row_rank, random_theta, rel_err
from ibvi.gaussian import Gaussian, VariationalParams, kl_divergence, w2_squared
from ibvi.harness.config import load_config
from ibvi.harness.experiments import run
from ibvi.objectives import (
    ObjectiveError,
    ObjectiveSpec,
    isotropic_scale,
    kl_grad,
    mean_field_kl,
    objective_grad,
    objective_value,
    regularized_loss_grad,
    regularizer_value,
    w2_isotropic_grad,
)
from ibvi.varlinear import RegressionProblem, expected_regression_grad, expected_regression_loss, regression_loss_grad
from ibvi.varnet import NetParams, mlp_specs


def regression_setup(seed, p=8, r=3):
    rng = np.random.default_rng(seed)
    prob = RegressionProblem(full_row_rank(rng, 3, p), rng.standard_normal(3))
    prior = Gaussian.isotropic(rng.standard_normal(p), float(rng.uniform(0.3, 1.5)))
    return rng, prob, prior, random_theta(rng, p, r)


class TestObjectiveSpec:
    def test_validation(self):
        prior = Gaussian.isotropic(np.zeros(2), 1.0)
        with pytest.raises(ObjectiveError):
            ObjectiveSpec("mmd", 1.0, prior)
        with pytest.raises(ObjectiveError):
            ObjectiveSpec("gvi_w2", -1.0, prior)
        with pytest.raises(ObjectiveError):
            ObjectiveSpec("gvi_w2", float("nan"), prior)
        with pytest.raises(ObjectiveError):
            ObjectiveSpec("elbo_kl", 1.0)
        with pytest.raises(ObjectiveError):
            ObjectiveSpec("elbo_kl", 1.0, Gaussian(np.zeros(2), np.array([[1.0], [0.0]])))

    def test_regularized_flag(self):
        prior = Gaussian.isotropic(np.zeros(2), 1.0)
        assert not ObjectiveSpec("expected_loss", 5.0).regularized
        assert not ObjectiveSpec("gvi_w2", 0.0, prior).regularized
        assert ObjectiveSpec("gvi_w2", 0.1, prior).regularized


class TestObjectiveValue:
    @pytest.mark.parametrize("kind", ["expected_loss", "elbo_kl", "gvi_w2"])
    def test_lambda_zero(self, kind):
        _, prob, prior, theta = regression_setup(0, r=8)
        spec = ObjectiveSpec(kind, 0.0, prior)
        assert objective_value(spec, lambda t: expected_regression_loss(prob, t), theta) == expected_regression_loss(prob, theta)

    def test_expected_loss_ignores_lambda(self):
        _, prob, _, theta = regression_setup(1)
        spec = ObjectiveSpec("expected_loss", 10.0)
        assert objective_value(spec, lambda t: expected_regression_loss(prob, t), theta) == expected_regression_loss(prob, theta)

    def test_gvi_at_prior(self):
        _, prob, prior, _ = regression_setup(2)
        theta = prior.params()
        spec = ObjectiveSpec("gvi_w2", 3.0, prior)
        assert regularizer_value(spec, theta) == pytest.approx(0.0, abs=1e-12)
        assert objective_value(spec, lambda t: expected_regression_loss(prob, t), theta) == pytest.approx(expected_regression_loss(prob, theta))

    @pytest.mark.parametrize("seed", range(5))
    def test_isotropic_closed_form(self, seed):
        _, _, prior, theta = regression_setup(seed, p=8, r=3)
        sigma0 = isotropic_scale(prior)
        s = np.linalg.svd(theta.factor, compute_uv=False)
        closed = np.sum((theta.mu - prior.mean) ** 2) + np.sum((s - sigma0) ** 2) + (8 - 3) * sigma0**2
        assert regularizer_value(ObjectiveSpec("gvi_w2", 1.0, prior), theta) == pytest.approx(closed, rel=1e-10)
        assert w2_squared(theta.gaussian(), prior) == pytest.approx(closed, rel=1e-10)

    def test_kl_value_and_rank_deficiency(self):
        _, prob, prior, theta = regression_setup(3, r=8)
        spec = ObjectiveSpec("elbo_kl", 0.5, prior)
        expected = expected_regression_loss(prob, theta) + 0.5 * kl_divergence(theta.gaussian(), prior)
        assert objective_value(spec, lambda t: expected_regression_loss(prob, t), theta) == pytest.approx(expected)
        low_rank = VariationalParams(theta.mu, theta.factor[:, :2])
        with pytest.raises(ObjectiveError):
            objective_value(spec, lambda t: expected_regression_loss(prob, t), low_rank)
        with pytest.raises(ObjectiveError):
            objective_value(ObjectiveSpec("elbo_kl", 0.0, prior), lambda t: expected_regression_loss(prob, t), low_rank)


class TestW2Gradient:
    def test_mean_gradient_zero_at_prior_mean(self):
        _, _, prior, theta = regression_setup(0)
        gm, _, _ = w2_isotropic_grad(VariationalParams(prior.mean.copy(), theta.factor), prior)
        np.testing.assert_array_equal(gm, 0.0)

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        _, _, prior, theta = regression_setup(seed)
        gm, gf, degenerate = w2_isotropic_grad(theta, prior)
        assert not degenerate
        numeric = central_diff(lambda a: w2_squared(VariationalParams(*a).gaussian(), prior), theta.as_arrays())
        assert rel_err([gm, gf], numeric) < 1e-4

    def test_degenerate_flag(self):
        prior = Gaussian.isotropic(np.zeros(3), 1.0)
        theta = VariationalParams(np.zeros(3), np.eye(3)[:, :2])
        _, gf, degenerate = w2_isotropic_grad(theta, prior)
        assert degenerate
        np.testing.assert_allclose(gf, 0.0, atol=1e-12)
        diag = {}
        objective_grad(ObjectiveSpec("gvi_w2", 1.0, prior), lambda t: (np.zeros(3), np.zeros((3, 2))), theta, diag)
        assert diag["degenerate_svd"]

    def test_anisotropic_prior_rejected(self):
        prior = Gaussian(np.zeros(2), np.diag([1.0, 2.0]))
        with pytest.raises(ObjectiveError):
            w2_isotropic_grad(VariationalParams(np.zeros(2), np.eye(2)), prior)


class TestKlGradient:
    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        p = 5
        prior = Gaussian(rng.standard_normal(p), rng.standard_normal((p, p)) + 2 * np.eye(p))
        theta = random_theta(rng, p, p)
        theta = VariationalParams(theta.mu, theta.factor + 2 * np.eye(p))
        analytic = kl_grad(theta, prior)
        numeric = central_diff(lambda a: kl_divergence(VariationalParams(*a).gaussian(), prior), theta.as_arrays())
        assert rel_err(analytic, numeric) < 1e-4

    def test_zero_at_prior(self, rng):
        prior = Gaussian(rng.standard_normal(4), rng.standard_normal((4, 4)) + 3 * np.eye(4))
        gm, gf = kl_grad(prior.params(), prior)
        assert np.max(np.abs(gm)) < 1e-12 and np.max(np.abs(gf)) < 1e-10

    def test_rank_deficient(self, rng):
        prior = Gaussian.isotropic(np.zeros(3), 1.0)
        with pytest.raises(ObjectiveError):
            kl_grad(VariationalParams(np.zeros(3), np.eye(3)[:, :2]), prior)


class TestObjectiveGrad:
    @pytest.mark.parametrize("kind", ["expected_loss", "elbo_kl", "gvi_w2"])
    def test_lambda_zero(self, kind):
        _, prob, prior, theta = regression_setup(4, r=8)
        gm, gf = objective_grad(ObjectiveSpec(kind, 0.0, prior), lambda t: expected_regression_grad(prob, t), theta)
        em, ef = expected_regression_grad(prob, theta)
        np.testing.assert_array_equal(gm, em)
        np.testing.assert_array_equal(gf, ef)

    @pytest.mark.parametrize("kind", ["elbo_kl", "gvi_w2"])
    def test_full_objective_finite_differences(self, kind):
        _, prob, prior, theta = regression_setup(5, r=8)
        spec = ObjectiveSpec(kind, 0.7, prior)
        analytic = objective_grad(spec, lambda t: expected_regression_grad(prob, t), theta)
        numeric = central_diff(lambda a: objective_value(spec, lambda t: expected_regression_loss(prob, t), VariationalParams(*a)), theta.as_arrays())
        assert rel_err(analytic, numeric) < 1e-4

    def test_callback_wrapper(self):
        _, prob, prior, theta = regression_setup(6)
        spec = ObjectiveSpec("gvi_w2", 0.3, prior)
        fn = regularized_loss_grad(spec, regression_loss_grad(prob))
        batch = np.arange(prob.n)
        loss, grads = fn(theta, batch, None)
        assert loss == pytest.approx(objective_value(spec, lambda t: expected_regression_loss(prob, t), theta))
        expected = objective_grad(spec, lambda t: expected_regression_grad(prob, t), theta)
        for a, b in zip(grads, expected):
            np.testing.assert_allclose(a, b, atol=1e-12)

    def test_callback_wrapper_unregularized(self):
        _, prob, _, theta = regression_setup(7)
        base = regression_loss_grad(prob)
        fn = regularized_loss_grad(ObjectiveSpec("expected_loss"), base)
        batch = np.arange(prob.n)
        assert fn(theta, batch, None)[0] == base(theta, batch, None)[0]


class TestMeanFieldKl:
    def make_net(self, rng):
        specs = mlp_specs([2, 3, 1], [True, True], covariance="diagonal")
        mus = [rng.standard_normal((s.fan_out, s.fan_in)) for s in specs]
        factors = [rng.uniform(0.2, 1.5, s.factor_shape()) for s in specs]
        return NetParams(mus, factors, specs)

    def test_matches_dense_kl(self, rng):
        net = self.make_net(rng)
        total, _ = mean_field_kl(net, [0.8, 1.3])
        dense = 0.0
        for mu, f, s0 in zip(net.mus, net.factors, [0.8, 1.3]):
            q = Gaussian(mu.reshape(-1), np.diag(f))
            dense += kl_divergence(q, Gaussian.isotropic(np.zeros(mu.size), s0))
        assert total == pytest.approx(dense, rel=1e-10)

    def test_finite_differences(self, rng):
        net = self.make_net(rng)
        _, analytic = mean_field_kl(net, [0.8, 1.3])
        numeric = central_diff(lambda a: mean_field_kl(net.with_arrays(a), [0.8, 1.3])[0], net.as_arrays())
        assert rel_err(analytic, numeric) < 1e-6

    def test_lowrank_layers_ignored(self, rng):
        specs = mlp_specs([2, 3, 1], [False, True], [0, 2])
        net = NetParams([rng.standard_normal((3, 2)), rng.standard_normal((1, 3))], [np.zeros((6, 0)), rng.standard_normal((3, 2))], specs)
        total, grads = mean_field_kl(net, [1.0, 1.0])
        assert total == 0.0 and all(np.all(g == 0) for g in grads)

    def test_zero_std(self, rng):
        net = self.make_net(rng)
        net.factors[0][0] = 0.0
        with pytest.raises(ObjectiveError):
            mean_field_kl(net, [1.0, 1.0])


@pytest.mark.slow
class TestToyTrainPointVariance:
    """Predictive variance at the toy training inputs after long training."""

    def train_variances(self, objective, *overrides):
        cfg = load_config("toy-demo", overrides=[f"params.objectives={objective}", *overrides])
        return np.array([r["std"] ** 2 for r in run(cfg).tables["train_points"].where(objective=objective)])

    def test_expected_loss_collapses(self):
        # the variance decays roughly like 1/t, so this run is ten times the demo length
        var = self.train_variances("expected_loss", "optimizer.steps=1000000", "optimizer.record_every=1000000")
        assert var.max() < 1e-6

    def test_elbo_keeps_variance(self):
        assert self.train_variances("elbo_kl").min() > 1e-6
