import numpy as np
import pytest

from cdl import network
from cdl.network import (
    DegenerateBatchError,
    FeatureBatch,
    ForwardCache,
    NetworkParams,
    NetworkShapeError,
    NonFiniteActivationError,
    TrainConfig,
    backward,
    cost,
    forward,
    init_params,
    input_gradient,
    mmd,
    mutual_information,
    regularizer_weight,
)
from tools.verify import network_check_batch, network_gradient_error


def _zero_params(arch, activation):
    weights = [np.zeros((o, i)) for i, o in zip(arch[:-1], arch[1:])]
    biases = [np.zeros(o) for o in arch[1:]]
    return NetworkParams(weights, biases, activation)


def _cache_from_top(h_t, h_s):
    """只有输入层的缓存，直接在给定激活值上测估计量"""
    h_t = np.asarray(h_t, dtype=np.float64)
    h_s = np.asarray(h_s, dtype=np.float64)
    return ForwardCache(z_s=[None], z_t=[None], h_s=[h_s], h_t=[h_t], activation="sigmoid",
                        pooled_mean_s=[float(h_s.mean())], pooled_mean_t=[float(h_t.mean())],
                        pooled_std_s=[float(h_s.std())], pooled_std_t=[float(h_t.std())])


class TestForward:

    @pytest.mark.parametrize("activation, expected", [("sigmoid", 0.5), ("tanh", 0.0)])
    def test_zero_params(self, rng, activation, expected):
        params = _zero_params([3, 4, 2], activation)
        cache = forward(params, FeatureBatch(rng.normal(size=(5, 3)), rng.normal(size=(5, 3))))
        for m in (1, 2):
            np.testing.assert_array_equal(cache.h_s[m], expected)
            np.testing.assert_array_equal(cache.h_t[m], expected)

    def test_matches_naive_loop(self, rng, small_cfg):
        params = init_params([3, 4, 3], small_cfg)
        params.biases[0] += 0.3
        batch = FeatureBatch(rng.normal(size=(6, 3)), rng.normal(size=(6, 3)))
        cache = forward(params, batch)
        for i in range(batch.n):
            h = list(batch.target[i])
            for w, b in zip(params.weights, params.biases):
                z = [sum(w[j, k] * h[k] for k in range(len(h))) + b[j] for j in range(w.shape[0])]
                h = [1.0 / (1.0 + np.exp(-v)) for v in z]
            np.testing.assert_allclose(cache.h_t[-1][i], h, atol=1e-12)

    def test_dimension_mismatch(self, rng, small_cfg):
        params = init_params([3, 4], small_cfg)
        with pytest.raises(NetworkShapeError):
            forward(params, FeatureBatch(rng.normal(size=(4, 2)), rng.normal(size=(4, 2))))

    def test_overflow_names_layer(self):
        params = NetworkParams([np.array([[1e308, 1e308]])], [np.zeros(1)], "tanh")
        batch = FeatureBatch(np.array([[10.0, 10.0]]), np.array([[1.0, 1.0]]))
        with pytest.raises(NonFiniteActivationError, match="layer 1"):
            with np.errstate(over="ignore", invalid="ignore"):
                forward(params, batch)

    def test_incoherent_layers(self):
        with pytest.raises(NetworkShapeError):
            NetworkParams([np.zeros((4, 3)), np.zeros((2, 5))], [np.zeros(4), np.zeros(2)])


class TestMutualInformation:

    def test_identical_branches(self, rng):
        h = rng.random((10, 3))
        assert mutual_information(_cache_from_top(h, h)) == pytest.approx(0.0, abs=1e-12)

    def test_anticorrelated(self, rng):
        h = rng.random((10, 3))
        mirrored = -(h - h.mean()) + h.mean()
        assert mutual_information(_cache_from_top(mirrored, h)) == pytest.approx(-1.0, abs=1e-12)

    def test_two_pass_pearson_oracle(self, rng):
        a, b = rng.random((20, 4)), rng.random((20, 4))
        x, y = a.ravel(), b.ravel()
        mx, my = sum(x) / len(x), sum(y) / len(y)
        cov = sum((xi - mx) * (yi - my) for xi, yi in zip(x, y))
        r = cov / np.sqrt(sum((xi - mx) ** 2 for xi in x) * sum((yi - my) ** 2 for yi in y))
        cache = _cache_from_top(a, b)
        assert mutual_information(cache) == pytest.approx(-0.5 * (1.0 - r), abs=1e-12)
        assert mutual_information(cache, estimator="literal") == pytest.approx(-0.5 * (1.0 - r), abs=1e-12)

    def test_affine_rescaling_invariance(self, rng):
        a, b = rng.random((15, 2)), rng.random((15, 2))
        base = mutual_information(_cache_from_top(a, b))
        scaled = mutual_information(_cache_from_top(3.0 * a + 1.5, 3.0 * b + 1.5))
        assert scaled == pytest.approx(base, abs=1e-10)
        assert -1.0 <= base <= 0.0

    def test_constant_activations(self):
        with pytest.raises(DegenerateBatchError):
            mutual_information(_cache_from_top(np.ones((4, 2)), np.ones((4, 2))))


class TestMmd:

    def test_identical(self, rng):
        h = rng.random((8, 3))
        assert mmd(_cache_from_top(h, h)) == 0.0

    def test_single_unit(self):
        assert mmd(_cache_from_top([[2.0], [2.0]], [[0.0], [0.0]])) == pytest.approx(4.0)

    def test_loop_oracle(self, rng):
        a, b = rng.random((12, 3)), rng.random((12, 3))
        delta = [0.0] * 3
        for i in range(12):
            for j in range(3):
                delta[j] += (a[i, j] - b[i, j]) / 12
        assert mmd(_cache_from_top(a, b)) == pytest.approx(sum(d * d for d in delta), abs=1e-12)


class TestCost:

    def test_identical_branches_zero_params(self, rng):
        params = _zero_params([2, 2], "sigmoid")
        h = rng.random((6, 2))
        cache = _cache_from_top(h, h)
        assert cost(params, cache, TrainConfig()) == pytest.approx(0.0, abs=1e-12)

    def test_regularizer_only(self, rng):
        params = NetworkParams([np.array([[1.0, 0.0], [0.0, 1.0]])], [np.zeros(2)])
        h = rng.random((6, 2))
        assert params.squared_norm() == 2.0
        cfg = TrainConfig(beta=10.0, reg_normalization="sum")
        assert cost(params, _cache_from_top(h, h), cfg) == pytest.approx(-20.0, abs=1e-12)

    def test_mean_regularizer_divides_by_parameter_count(self, rng):
        params = NetworkParams([np.array([[1.0, 0.0], [0.0, 1.0]])], [np.zeros(2)])
        h = rng.random((6, 2))
        assert params.n_params == 6
        cfg = TrainConfig(beta=12.0, reg_normalization="mean")
        assert regularizer_weight(params, cfg) == 2.0
        assert cost(params, _cache_from_top(h, h), cfg) == pytest.approx(-4.0, abs=1e-12)

    def test_composition(self, rng, small_cfg):
        params = init_params([3, 5, 2], small_cfg)
        cache = forward(params, network_check_batch(3))
        norm = 0.0
        for w, b in zip(params.weights, params.biases):
            norm += sum(v * v for v in w.ravel()) + sum(v * v for v in b)
        expected = mutual_information(cache) - small_cfg.alpha * mmd(cache) - small_cfg.beta * norm
        assert cost(params, cache, small_cfg) == pytest.approx(expected, abs=1e-10)


class TestBackward:

    def test_finite_differences(self, small_cfg):
        for seed in range(3):
            for activation in ("sigmoid", "tanh"):
                cfg = small_cfg.model_copy(update={"rng_seed": seed, "activation": activation})
                params = init_params([3, 4, 3], cfg)
                assert network_gradient_error(params, network_check_batch(seed), cfg) < 1e-4

    def test_frozen_sigma_finite_differences_disagree(self):
        cfg = TrainConfig(alpha=0.0, beta=0.0, mi_gradient="frozen_sigma", rng_seed=2)
        params = init_params([3, 4, 3], cfg)
        assert network_gradient_error(params, network_check_batch(2), cfg) > 1e-4

    def test_zero_mmd_seed_for_identical_branches(self, rng):
        x = rng.normal(size=(10, 3))
        cache = forward(init_params([3, 4], TrainConfig()), FeatureBatch(x, x))
        d_t, d_s = network.mmd_seeds(cache)
        assert np.all(d_t == 0.0) and np.all(d_s == 0.0)

    def test_beta_only(self, rng, monkeypatch):
        cfg = TrainConfig(alpha=0.0, beta=3.0, rng_seed=1, reg_normalization="sum")
        params = init_params([3, 4], cfg)
        cache = forward(params, FeatureBatch(rng.normal(size=(8, 3)), rng.normal(size=(8, 3))))
        zeros = lambda c, conf: (np.zeros_like(c.h_t[-1]), np.zeros_like(c.h_s[-1]))
        monkeypatch.setattr(network, "mi_seeds", zeros)
        grads = backward(params, cache, cfg)
        np.testing.assert_array_equal(grads.dW[0], -2.0 * 3.0 * params.weights[0])
        np.testing.assert_array_equal(grads.db[0], -2.0 * 3.0 * params.biases[0])


class TestInputGradient:

    def test_matches_finite_differences(self, small_cfg):
        params = init_params([3, 4, 2], small_cfg)
        batch = network_check_batch(5, n=12)
        g = input_gradient(params, forward(params, batch), small_cfg)
        h = 1e-6
        for i, j in [(0, 0), (3, 1), (11, 2)]:
            plus, minus = batch.source.copy(), batch.source.copy()
            plus[i, j] += h
            minus[i, j] -= h
            c_plus = cost(params, forward(params, FeatureBatch(plus, batch.target)), small_cfg)
            c_minus = cost(params, forward(params, FeatureBatch(minus, batch.target)), small_cfg)
            assert g[i, j] == pytest.approx((c_plus - c_minus) / (2 * h), rel=1e-4, abs=1e-9)

    def test_terms_compose(self, small_cfg):
        params = init_params([3, 4, 2], small_cfg)
        cache = forward(params, network_check_batch(6))
        both = input_gradient(params, cache, small_cfg, "both")
        parts = input_gradient(params, cache, small_cfg, "mi") - small_cfg.alpha * input_gradient(
            params, cache, small_cfg, "mmd")
        np.testing.assert_allclose(both, parts, atol=1e-14)


class TestInitParams:

    def test_deterministic(self):
        a = init_params([3, 16, 8], TrainConfig(rng_seed=4))
        b = init_params([3, 16, 8], TrainConfig(rng_seed=4))
        for wa, wb in zip(a.weights, b.weights):
            np.testing.assert_array_equal(wa, wb)
        assert a.dims == [3, 16, 8]

    def test_bad_architecture(self):
        with pytest.raises(NetworkShapeError):
            init_params([3], TrainConfig())
