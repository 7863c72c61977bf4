import numpy as np
import pytest

from conftest import assert_within_se, central_diff, rel_err
from ibvi.gaussian import ShapeError
from ibvi.varnet import (
    LayerSpec,
    NetParams,
    backward,
    feature_stats,
    forward,
    forward_many,
    mlp_specs,
    noise_dim,
    predictive_samples,
    rmse,
    split_noise,
    squared_error_loss_grad,
)


def random_net(rng, specs, scale=0.7):
    mus = [scale * rng.standard_normal((s.fan_out, s.fan_in)) for s in specs]
    factors = [scale * rng.standard_normal(s.factor_shape()) for s in specs]
    return NetParams(mus, factors, specs)


def sampled_loss(net, specs, x, y, z):
    out, _ = forward(net, specs, x, z)
    return 0.5 * float(np.sum((out - y) ** 2))


class TestLayerSpec:
    def test_validation(self):
        with pytest.raises(ValueError):
            LayerSpec(0, 3)
        with pytest.raises(ValueError):
            LayerSpec(2, 3, activation="gelu")
        with pytest.raises(ValueError):
            LayerSpec(2, 3, rank=2)
        with pytest.raises(ValueError):
            LayerSpec(2, 3, probabilistic=True, rank=7)
        with pytest.raises(ValueError):
            LayerSpec(2, 3, covariance="banded")

    def test_factor_shapes(self):
        assert LayerSpec(2, 3).factor_shape() == (6, 0)
        assert LayerSpec(2, 3, True, 2).factor_shape() == (6, 2)
        diag = LayerSpec(2, 3, True, covariance="diagonal")
        assert diag.factor_shape() == (6,) and diag.noise_dim == 6

    def test_mlp_specs(self):
        specs = mlp_specs([2, 4, 4, 1], [False, True, True], [0, 3, 2], activation="tanh")
        assert [s.activation for s in specs] == ["tanh", "tanh", "identity"]
        assert noise_dim(specs) == 5
        assert specs[0].rank == 0


class TestNoise:
    def test_split_flat_and_list(self, rng):
        specs = mlp_specs([2, 3, 1], [True, True], [2, 3])
        flat = rng.standard_normal(5)
        parts = split_noise(specs, flat)
        np.testing.assert_array_equal(parts[1], flat[2:])
        np.testing.assert_array_equal(split_noise(specs, parts)[0], flat[:2])

    def test_wrong_length(self):
        specs = mlp_specs([2, 3, 1], [True, False], [2, 0])
        with pytest.raises(ShapeError):
            split_noise(specs, np.zeros(3))
        with pytest.raises(ShapeError):
            split_noise(specs, [np.zeros(1), np.zeros(0)])


class TestForward:
    def test_single_linear_layer(self, rng):
        specs = [LayerSpec(3, 2, True, 2, activation="identity")]
        net = random_net(rng, specs)
        x = rng.standard_normal(3)
        out, _ = forward(net, specs, x, np.zeros(2))
        np.testing.assert_allclose(out, net.mus[0] @ x)

    def test_zero_input_relu(self, rng):
        specs = mlp_specs([3, 5, 1], [True, True], [2, 2])
        out, _ = forward(random_net(rng, specs), specs, np.zeros(3), rng.standard_normal(4))
        np.testing.assert_array_equal(out, [0.0])

    def test_zero_factor_full_rank_is_deterministic(self, rng):
        prob_specs = mlp_specs([3, 4, 1], [True, True], [12, 4])
        det_specs = mlp_specs([3, 4, 1])
        net = random_net(rng, prob_specs)
        net.factors = [np.zeros_like(f) for f in net.factors]
        det = NetParams(net.mus, [np.zeros(s.factor_shape()) for s in det_specs], det_specs)
        x = rng.standard_normal((5, 3))
        a, _ = forward(net, prob_specs, x, rng.standard_normal(16))
        b, _ = forward(det, det_specs, x, np.zeros(0))
        np.testing.assert_array_equal(a, b)

    def test_linear_net_mean_is_product_of_means(self, rng):
        specs = mlp_specs([2, 3, 3, 1], [True, True, True], [2, 3, 2], activation="identity")
        net = random_net(rng, specs, scale=0.5)
        x = np.array([[0.7, -1.2]])
        draws = rng.standard_normal((100_000, noise_dim(specs)))
        out = predictive_samples(net, specs, x, draws)[:, 0, 0]
        assert_within_se(out, (net.mus[2] @ net.mus[1] @ net.mus[0] @ x[0]).item())

    def test_forward_many_matches_loop(self, rng):
        for cov in ("lowrank", "diagonal"):
            specs = mlp_specs([2, 5, 4, 1], [False, True, True], [0, 3, 2], covariance=cov, activation="tanh")
            net = random_net(rng, specs)
            x = rng.standard_normal((6, 2))
            draws = rng.standard_normal((7, noise_dim(specs)))
            many = forward_many(net, specs, x, draws, chunk=3)
            for m, z in enumerate(draws):
                _, cache = forward(net, specs, x, z)
                for layer, post in enumerate(cache.post):
                    np.testing.assert_allclose(many[layer][m], post, atol=1e-13)

    def test_shape_errors(self, rng):
        specs = mlp_specs([3, 2, 1], [True, False], [2, 0])
        net = random_net(rng, specs)
        with pytest.raises(ShapeError):
            forward(net, specs, np.zeros(4), np.zeros(2))
        with pytest.raises(ShapeError):
            forward_many(net, specs, np.zeros((1, 3)), np.zeros((2, 5)))
        bad = NetParams([np.zeros((2, 2)), net.mus[1]], net.factors, specs)
        with pytest.raises(ShapeError):
            forward(bad, specs, np.zeros(3), np.zeros(2))


class TestBackward:
    def test_zero_upstream(self, rng):
        specs = mlp_specs([3, 4, 1], [True, True], [2, 2])
        net = random_net(rng, specs)
        z = rng.standard_normal(4)
        g = backward(net, specs, rng.standard_normal(3), z, np.zeros(1))
        assert all(np.all(a == 0) for a in g.as_arrays())

    @pytest.mark.parametrize("seed", range(20))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        activation = ("relu", "tanh")[seed % 2]
        covariance = ("lowrank", "diagonal")[(seed // 2) % 2]
        specs = mlp_specs([3, 4, 1], [True, True], [3, 2], covariance=covariance, activation=activation)
        net = random_net(rng, specs)
        x, y = rng.standard_normal((2, 3)), rng.standard_normal((2, 1))
        z = rng.standard_normal(noise_dim(specs))
        out, cache = forward(net, specs, x, z)
        analytic = backward(net, specs, x, z, out - y, cache).as_arrays()
        numeric = central_diff(lambda arrs: sampled_loss(net.with_arrays(arrs), specs, x, y, z), net.as_arrays())
        assert rel_err(analytic, numeric) < 1e-3

    def test_classical_backprop_one_hidden_layer(self, rng):
        specs = mlp_specs([3, 5, 1])
        net = random_net(rng, specs)
        x, y = rng.standard_normal(3), np.array([0.3])
        w1, w2 = net.mus
        pre = w1 @ x
        h = np.maximum(pre, 0.0)
        delta = w2 @ h - y
        g = backward(net, specs, x, np.zeros(0), delta)
        np.testing.assert_allclose(g.mus[1], np.outer(delta, h))
        np.testing.assert_allclose(g.mus[0], np.outer((w2.T @ delta) * (pre > 0), x))

    def test_pathwise_gradient_unbiased(self, rng):
        # deterministic first layer, Gaussian output layer: E[(y - h.w)^2] / 2 has a closed form
        specs = [LayerSpec(2, 3, activation="identity"), LayerSpec(3, 1, True, 3, activation="identity")]
        net = random_net(rng, specs, scale=0.5)
        x, y = np.array([[0.4, -0.9]]), np.array([[0.5]])

        def closed_form(arrs):
            mu1, _, mu2, s2 = arrs
            h = (mu1 @ x[0])
            return 0.5 * ((y[0, 0] - mu2[0] @ h) ** 2 + np.sum((s2.T @ h) ** 2))

        numeric = central_diff(closed_form, net.as_arrays())
        draws = rng.standard_normal((100_000, 3))
        per_draw = []
        for z in draws:
            out, cache = forward(net, specs, x, z)
            per_draw.append(np.concatenate([a.ravel() for a in backward(net, specs, x, z, out - y, cache).as_arrays()]))
        assert_within_se(np.array(per_draw), np.concatenate([a.ravel() for a in numeric]))


class TestSquaredErrorLossGrad:
    @pytest.mark.parametrize("reduction", ["mean", "sum"])
    def test_finite_differences(self, rng, reduction):
        specs = mlp_specs([2, 4, 1], [True, True], [2, 2], activation="tanh")
        net = random_net(rng, specs)
        x, y = rng.standard_normal((3, 2)), rng.standard_normal((3, 1))
        fn = squared_error_loss_grad(specs, x, y, sigma2=0.5, reduction=reduction)
        noise = rng.standard_normal((4, 4))
        batch = np.array([0, 2])
        _, analytic = fn(net, batch, noise)
        numeric = central_diff(lambda arrs: fn(net.with_arrays(arrs), batch, noise)[0], net.as_arrays())
        assert rel_err(analytic, numeric) < 1e-6

    def test_loss_value(self, rng):
        specs = mlp_specs([2, 3, 1], [False, True], [0, 2])
        net = random_net(rng, specs)
        x, y = rng.standard_normal((4, 2)), rng.standard_normal((4, 1))
        noise = rng.standard_normal((3, 2))
        loss, _ = squared_error_loss_grad(specs, x, y)(net, np.arange(4), noise)
        out = predictive_samples(net, specs, x, noise)
        assert loss == pytest.approx(0.5 * np.mean((out - y[None]) ** 2))

    def test_unknown_reduction(self):
        with pytest.raises(ValueError):
            squared_error_loss_grad(mlp_specs([1, 1]), np.zeros((1, 1)), np.zeros(1), reduction="max")


class TestFeatureStats:
    def test_no_change(self, rng):
        specs = mlp_specs([2, 4, 1], [True, True], [2, 2])
        net = random_net(rng, specs)
        fs = feature_stats(net, net.copy(), specs, rng.standard_normal((3, 2)), 50, 0)
        assert all(np.all(d == 0) for d in fs.delta_m1 + fs.delta_m2)
        assert fs.delta_rmse(1) == [0.0, 0.0] and fs.delta_rmse(2) == [0.0, 0.0]

    def test_deterministic_net_has_zero_variance(self, rng):
        specs = mlp_specs([2, 4, 1])
        net = random_net(rng, specs)
        fs = feature_stats(net, net, specs, rng.standard_normal((3, 2)), 10, 0)
        assert all(np.all(v == 0.0) for v in fs.m2_init)
        assert fs.init_rmse(1)[0] > 0

    def test_moments_match_direct_estimate(self, rng):
        specs = mlp_specs([2, 4, 1], [True, True], [2, 2])
        net0, net1 = random_net(rng, specs), random_net(rng, specs)
        x = rng.standard_normal((3, 2))
        fs = feature_stats(net0, net1, specs, x, 200, 5)
        draws = np.random.default_rng(5).standard_normal((200, 4))
        outs = predictive_samples(net1, specs, x, draws).reshape(200, -1)
        np.testing.assert_allclose(fs.m1_final[-1], outs.mean(axis=0))
        np.testing.assert_allclose(fs.m2_final[-1], outs.var(axis=0))
        assert all(np.all(v >= 0) for v in fs.m2_final)

    def test_needs_two_draws(self, rng):
        specs = mlp_specs([2, 1], [True], [1])
        net = random_net(rng, specs)
        with pytest.raises(ValueError):
            feature_stats(net, net, specs, np.zeros((1, 2)), 1, 0)

    def test_rmse(self):
        assert rmse([3.0, 4.0]) == pytest.approx(np.sqrt(12.5))
        assert rmse([]) == 0.0
