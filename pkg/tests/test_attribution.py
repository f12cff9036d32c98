import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import brute_force_shapley, linear_net, relu_net
from refxplain.attribution import (
    AlphaBeta,
    Epsilon,
    Explanation,
    Gamma,
    LrpConfig,
    clip_negative,
    clip_positive,
    gradient_x_input,
    integrated_gradients,
    lrp,
    shapley_exact,
    shapley_sampled,
)
from refxplain.errors import ConfigError, EnumerationLimitError
from refxplain.network import DenseLayer, DenseNetwork, build_max_network, random_network, strip_biases


def lrp_gamma_loops(net, x, gammas, ignore_biases):
    """Straight-from-the-definition LRP-gamma with explicit loops over (j, k)."""
    acts = [np.asarray(x, dtype=float)]
    for layer in net.layers:
        z = layer.weights @ acts[-1] + layer.biases
        acts.append(np.maximum(z, 0.0) if layer.activation == "relu" else z)
    R = [acts[-1][0]]
    for k in range(len(net.layers) - 1, -1, -1):
        W, b, a, g = net.layers[k].weights, net.layers[k].biases, acts[k], gammas[k]
        new = np.zeros(len(a))
        for out in range(W.shape[0]):
            contrib = [a[j] * W[out, j] + g * max(a[j] * W[out, j], 0.0) for j in range(len(a))]
            bias = 0.0 if ignore_biases else b[out] + g * max(b[out], 0.0)
            denom = sum(contrib) + bias
            if denom != 0.0:
                for j in range(len(a)):
                    new[j] += contrib[j] / denom * R[out]
        R = new
    return R


class TestLrp:
    def test_max_network_gamma_zero(self):
        e = lrp(build_max_network(), [1100.0, 900.0], LrpConfig.gamma([0.0, 0.0], ignore_biases=True))
        np.testing.assert_allclose(e.attributions, [1100.0, 0.0], atol=1e-12)

    @pytest.mark.parametrize("ignore", [True, False])
    @pytest.mark.parametrize("seed", range(4))
    def test_matches_loop_oracle(self, seed, ignore):
        rng = np.random.default_rng(seed)
        net = relu_net(rng, 5, hidden=7)
        x = rng.normal(size=5)
        gammas = [2.5, 0.3]
        e = lrp(net, x, LrpConfig.gamma(gammas, ignore_biases=ignore))
        np.testing.assert_allclose(e.attributions, lrp_gamma_loops(net, x, gammas, ignore), rtol=1e-10, atol=1e-12)

    def test_nonnegative_inputs_use_weight_form(self, rng):
        # with a >= 0 the rule is z_jk = a_j (w_jk + gamma w_jk+)
        net = relu_net(rng, 4, hidden=9)
        x = rng.uniform(0, 2, size=4)
        W1, b1 = net.layers[0].weights, net.layers[0].biases
        V = net.layers[1].weights[0]
        h = np.maximum(W1 @ x + b1, 0.0)
        R1 = h * V  # gamma 0 on top: z_j / (sum z + c) times y = sum z + c
        Wg = W1 + 1.5 * np.maximum(W1, 0.0)
        s = Wg @ x + b1 + 1.5 * np.maximum(b1, 0.0)
        expected = x * (Wg.T @ np.divide(R1, s, out=np.zeros_like(s), where=s != 0))
        got = lrp(net, x, LrpConfig.gamma([1.5, 0.0])).attributions
        np.testing.assert_allclose(got, expected, rtol=1e-10, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), d=st.integers(1, 12), h=st.integers(1, 40), g=st.floats(0, 10))
    def test_conservation_bias_free(self, seed, d, h, g):
        rng = np.random.default_rng(seed)
        net = strip_biases(random_network(d, (h,), rng))
        x = rng.normal(size=d)
        e = lrp(net, x, LrpConfig.gamma([g, rng.uniform(0, 3)]))
        assert abs(e.total + e.params["dropped_relevance"] - float(net.predict(x))) <= 1e-9 * max(1, abs(e.total))

    def test_ignore_biases_conserves_with_biases(self, rng):
        net = relu_net(rng, 6)
        x = rng.normal(size=6)
        e = lrp(net, x, LrpConfig.gamma([1.0, 0.0], ignore_biases=True))
        assert e.total == pytest.approx(float(net.predict(x)), abs=1e-9)

    @pytest.mark.parametrize("seed", range(10))
    def test_reduces_to_gradient_x_input(self, seed):
        rng = np.random.default_rng(seed)
        net = random_network(int(rng.integers(2, 10)), (int(rng.integers(2, 30)), int(rng.integers(2, 10))), rng)
        x = rng.normal(size=net.input_dim)
        gxi = gradient_x_input(net, x).attributions
        for cfg in (LrpConfig.uniform(Gamma(0.0), 3), LrpConfig.uniform(Epsilon(0.0), 3)):
            np.testing.assert_allclose(lrp(net, x, cfg).attributions, gxi, rtol=0, atol=1e-9)

    def test_epsilon_absorbs(self):
        net = linear_net([1.0, 1.0])
        e = lrp(net, [1.0, 1.0], LrpConfig([Epsilon(2.0)]))
        # s = 2, stabilised 4: each input gets 1 * 2 / 4
        np.testing.assert_allclose(e.attributions, [0.5, 0.5])
        assert e.conservation_gap == pytest.approx(1.0)

    def test_epsilon_sign_of_zero_is_positive(self):
        net = linear_net([1.0, -1.0])
        e = lrp(net, [1.0, 1.0], LrpConfig([Epsilon(0.5)]))
        np.testing.assert_allclose(e.attributions, [0.0, 0.0])

    def test_alpha_beta(self):
        net = linear_net([2.0, -1.0])
        e = lrp(net, [3.0, 4.0], LrpConfig([AlphaBeta(2.0, 1.0)]))
        # positive part 6 gets 2 * R, negative part -4 gets -1 * R: R = 2
        np.testing.assert_allclose(e.attributions, [4.0, -2.0])

    def test_alpha_beta_constraint(self):
        with pytest.raises(ConfigError):
            AlphaBeta(2.0, 0.0)

    def test_negative_gamma(self):
        with pytest.raises(ConfigError):
            Gamma(-1.0)

    def test_rule_count(self):
        with pytest.raises(ConfigError):
            lrp(build_max_network(), [1.0, 2.0], LrpConfig.gamma([0.0]))

    def test_zero_denominator_recorded(self):
        net = DenseNetwork([DenseLayer([[1.0, -1.0]], [0.0], "identity")])
        e = lrp(net, [1.0, 1.0], LrpConfig([Gamma(0.0)]))
        np.testing.assert_array_equal(e.attributions, [0.0, 0.0])
        assert e.params["dropped_relevance"] == 0.0


class TestGradientXInput:
    def test_linear(self):
        e = gradient_x_input(linear_net([2.0, -1.0]), np.array([3.0, 4.0]))
        np.testing.assert_array_equal(e.attributions, [6.0, -4.0])
        assert e.total == 2.0 == e.prediction

    def test_zero_input(self, rng):
        e = gradient_x_input(relu_net(rng, 4), np.zeros(4))
        np.testing.assert_array_equal(e.attributions, 0.0)

    def test_max_network(self):
        e = gradient_x_input(build_max_network(), np.array([1100.0, 900.0]))
        np.testing.assert_array_equal(e.attributions, [1100.0, 0.0])


class TestIntegratedGradients:
    @pytest.mark.parametrize("steps", [1, 7, 128])
    def test_linear_exact(self, rng, steps):
        w = rng.normal(size=5)
        x, x0 = rng.normal(size=5), rng.normal(size=5)
        e = integrated_gradients(linear_net(w), x, x0, steps=steps)
        np.testing.assert_allclose(e.attributions, w * (x - x0), rtol=1e-12, atol=1e-12)

    def test_max_network(self):
        e = integrated_gradients(build_max_network(), [1100.0, 900.0], [0.0, 0.0])
        np.testing.assert_allclose(e.attributions, [1100.0, 0.0])

    def test_square_midpoint(self):
        f = lambda X: np.asarray(X)[..., 0] ** 2
        grad = lambda X: 2 * np.asarray(X)
        e = integrated_gradients(f, [2.0], steps=1, gradient=grad)
        assert e.attributions[0] == 4.0

    def test_quadrature_oracle(self, rng):
        net = relu_net(rng, 3)
        x, x0 = rng.normal(size=3), np.zeros(3)
        fine = (np.arange(20000) + 0.5) / 20000
        expected = (x - x0) * net.gradient(x0 + fine[:, None] * (x - x0)).mean(axis=0)
        e = integrated_gradients(net, x, x0, steps=20000)
        np.testing.assert_allclose(e.attributions, expected, rtol=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_conservation(self, seed):
        # smooth function: softplus network evaluated analytically
        rng = np.random.default_rng(seed)
        W, v = rng.normal(size=(6, 4)), rng.normal(size=6)
        f = lambda X: np.log1p(np.exp(np.asarray(X) @ W.T)) @ v
        grad = lambda X: (1 / (1 + np.exp(-(np.asarray(X) @ W.T))) * v) @ W
        x = rng.normal(size=4)
        e = integrated_gradients(f, x, steps=128, gradient=grad)
        assert abs(e.conservation_gap) <= 1e-6 * max(1.0, abs(e.prediction)) * 100
        finer = integrated_gradients(f, x, steps=256, gradient=grad)
        assert abs(finer.conservation_gap) <= abs(e.conservation_gap) + 1e-12

    def test_requires_gradient(self):
        with pytest.raises(ConfigError):
            integrated_gradients(lambda X: X.sum(-1), [1.0])

    def test_clipped_network_gradient(self, rng):
        net = relu_net(rng, 3)
        x = rng.normal(size=3)
        ref = float(net.predict(x)) - 0.5
        e = integrated_gradients(clip_positive(net, ref), x, steps=4096)
        assert e.prediction == pytest.approx(0.5)
        assert abs(e.conservation_gap) < 1e-2


class TestShapleyExact:
    def test_auction(self):
        g = clip_positive(lambda X: np.max(X, axis=-1), 1000.0)
        e = shapley_exact(g, [1100.0, 900.0], [1000.0, 1000.0])
        np.testing.assert_array_equal(e.attributions, [100.0, 0.0])

    def test_additive(self):
        e = shapley_exact(lambda X: X.sum(-1), [2.0, 3.0])
        np.testing.assert_array_equal(e.attributions, [2.0, 3.0])

    def test_max_symmetric(self):
        e = shapley_exact(lambda X: X.max(-1), [5.0, 5.0])
        np.testing.assert_array_equal(e.attributions, [2.5, 2.5])

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_permutation_oracle(self, seed):
        rng = np.random.default_rng(seed)
        d = int(rng.integers(2, 6))
        net = relu_net(rng, d)
        x, x0 = rng.normal(size=d), rng.normal(size=d)
        e = shapley_exact(net, x, x0)
        np.testing.assert_allclose(e.attributions, brute_force_shapley(net.predict, x, x0), atol=1e-12)
        assert abs(e.conservation_gap) <= 1e-9

    def test_symmetry_axiom(self, rng):
        net = relu_net(rng, 4)
        net.layers[0].weights[:, 2] = net.layers[0].weights[:, 1]
        x = rng.normal(size=4)
        x[2] = x[1]
        e = shapley_exact(net, x)
        assert e.attributions[1] == pytest.approx(e.attributions[2], abs=1e-12)

    def test_null_player(self, rng):
        net = relu_net(rng, 5)
        net.layers[0].weights[:, 3] = 0.0
        assert abs(shapley_exact(net, rng.normal(size=5)).attributions[3]) <= 1e-9

    def test_linearity(self, rng):
        a, b = relu_net(rng, 4), relu_net(rng, 4)
        x = rng.normal(size=4)
        both = shapley_exact(lambda X: a.predict(X) + 2 * b.predict(X), x).attributions
        np.testing.assert_allclose(both, shapley_exact(a, x).attributions + 2 * shapley_exact(b, x).attributions, atol=1e-12)

    def test_refuses_large_d(self):
        with pytest.raises(EnumerationLimitError, match="shapley_sampled"):
            shapley_exact(lambda X: X.sum(-1), np.ones(21))

    def test_unit_propagates(self):
        net = build_max_network()
        assert shapley_exact(net, [1.0, 2.0]).unit == "monetary units"


class TestShapleySampled:
    def test_exhaustive_equals_exact(self, rng):
        net = relu_net(rng, 4)
        x = rng.normal(size=4)
        e = shapley_sampled(net, x, n_permutations=math.factorial(4))
        assert e.params["exhaustive"]
        np.testing.assert_allclose(e.attributions, shapley_exact(net, x).attributions, atol=1e-9)

    def test_additive_single_permutation(self):
        e = shapley_sampled(lambda X: X @ np.array([1.0, -2.0, 3.0]), [1.0, 1.0, 1.0], n_permutations=1, seed=3)
        np.testing.assert_allclose(e.attributions, [1.0, -2.0, 3.0])

    def test_seeded(self, rng):
        net = relu_net(rng, 6)
        x = rng.normal(size=6)
        a = shapley_sampled(net, x, n_permutations=100, seed=1)
        b = shapley_sampled(net, x, n_permutations=100, seed=1)
        c = shapley_sampled(net, x, n_permutations=100, seed=2)
        np.testing.assert_array_equal(a.attributions, b.attributions)
        assert not np.array_equal(a.attributions, c.attributions)

    def test_efficiency_and_stderr(self, rng):
        net = relu_net(rng, 9)
        x = rng.normal(size=9)
        e = shapley_sampled(net, x, n_permutations=300, seed=0)
        assert abs(e.conservation_gap) < 1e-9
        assert len(e.params["stderr"]) == 9 and min(e.params["stderr"]) >= 0

    def test_zero_permutations(self):
        with pytest.raises(ConfigError):
            shapley_sampled(lambda X: X.sum(-1), [1.0], n_permutations=0)


class TestClipping:
    f = staticmethod(lambda X: np.asarray(X, dtype=float)[..., 0])

    def test_positive(self):
        g = clip_positive(self.f, 1000.0)
        np.testing.assert_array_equal(g(np.array([[1100.0], [800.0]])), [100.0, 0.0])

    def test_root_preserved(self):
        assert clip_positive(self.f, 500.0)(np.array([[0.0]]))[0] == 0.0

    def test_negative(self):
        g = clip_negative(self.f, 1000.0)
        np.testing.assert_array_equal(g(np.array([[1100.0], [800.0]])), [0.0, -200.0])


class TestExplanation:
    def test_gap_recomputed(self):
        e = Explanation([1.0, 2.0], prediction=5.0, reference_value=1.0)
        assert e.conservation_gap == 1.0
        assert e.with_attributions([2.0, 2.0]).conservation_gap == 0.0

    def test_json_key_order(self):
        doc = json.loads(Explanation([1.0], 2.0, 1.0, "kg", "m").to_json())
        assert list(doc) == [
            "method", "params", "prediction", "reference_value", "unit", "baseline", "attributions", "conservation_gap",
        ]

    def test_round_trip(self):
        e = Explanation([0.1, 1 / 3], 2.0, 0.5, "kg", "m", {"a": 1}, [0.0, 0.0])
        back = Explanation.from_dict(json.loads(e.to_json()))
        np.testing.assert_array_equal(back.attributions, e.attributions)
        assert back.conservation_gap == e.conservation_gap and back.unit == "kg"
