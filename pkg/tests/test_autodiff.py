"""Tests for services/autodiff.py: graph evaluation, adjoints, unrolled attention, gradient checks."""

import numpy as np
import pytest

from services import autodiff
from services.attention import AttentionParams, NormalizationSpec, dot_cost
from services.autodiff import Graph, attention_block, grad_check
from services.errors import GraphStateError, InvalidParameterError, ShapeMismatchError
from services.numerics import SeededRng
from services.sinkhorn import sinkhorn
from services.training import SetClassifier, synth_dataset
from tests.conftest import make_cloud


def attention_graph(n: int = 5, d: int = 2, iterations: int = 3, seed: int = 0):
    gen = SeededRng(seed).generator
    g = Graph()
    x = g.input("X", (n, d))
    W_Q = g.parameter("W_Q", 0.5 * gen.standard_normal((d, d)))
    W_K = g.parameter("W_K", 0.5 * gen.standard_normal((d, d)))
    W_V = g.parameter("W_V", 0.5 * gen.standard_normal((d, d)))
    out, kernel = attention_block(g, x, W_Q, W_K, W_V, iterations)
    g.half_squared_norm(out)
    return g, kernel, {"X": make_cloud(n, d, seed=seed).points}


# ════════════════════════════════════════════════════════════════
# Graph construction
# ════════════════════════════════════════════════════════════════


class TestGraphConstruction:
    def test_shape_inference(self):
        g = Graph()
        a = g.input("a", (3, 4))
        b = g.parameter("b", np.ones((4, 2)))
        c = g.matmul(a, b)
        assert c.shape == (3, 2)
        assert g.logsumexp_rows(c).shape == (3, 1)
        assert g.logsumexp_cols(c).shape == (1, 2)
        assert g.mean_rows(c).shape == (1, 2)
        assert g.half_squared_norm(c).shape == ()

    def test_matmul_mismatch(self):
        g = Graph()
        with pytest.raises(ShapeMismatchError):
            g.matmul(g.input("a", (3, 4)), g.input("b", (3, 4)))

    def test_bad_broadcast(self):
        g = Graph()
        with pytest.raises(ShapeMismatchError):
            g.broadcast_sub(g.input("a", (3, 4)), g.input("v", (4, 1)))

    def test_duplicate_parameter(self):
        g = Graph()
        g.parameter("W", np.eye(2))
        with pytest.raises(InvalidParameterError):
            g.parameter("W", np.eye(2))


# ════════════════════════════════════════════════════════════════
# forward / backward
# ════════════════════════════════════════════════════════════════


class TestForwardBackward:
    def test_quadratic_gradient(self):
        x_val = np.array([[1.0, 2.0], [0.5, -1.0], [0.0, 3.0]])
        W_val = np.array([[0.3, -0.2], [0.1, 0.4]])
        g = Graph()
        x = g.input("x", (3, 2))
        W = g.parameter("W", W_val)
        g.half_squared_norm(g.matmul(x, W))
        loss = g.forward({"x": x_val})
        assert float(loss) == pytest.approx(0.5 * np.sum((x_val @ W_val) ** 2))
        grads = g.backward()
        np.testing.assert_allclose(grads["W"], x_val.T @ (x_val @ W_val), rtol=1e-14)

    def test_backward_before_forward(self):
        g, _, _ = attention_graph()
        with pytest.raises(GraphStateError):
            g.backward()

    def test_missing_input(self):
        g, _, _ = attention_graph()
        with pytest.raises(ShapeMismatchError):
            g.forward({})

    def test_wrong_input_shape(self):
        g, _, _ = attention_graph(n=5)
        with pytest.raises(ShapeMismatchError):
            g.forward({"X": np.zeros((4, 2))})

    def test_unused_parameter_gets_zero_gradient(self):
        g = Graph()
        x = g.input("x", (1, 1))
        g.parameter("unused", np.ones((2, 2)))
        W = g.parameter("W", np.ones((1, 1)))
        g.half_squared_norm(g.matmul(x, W))
        g.forward({"x": np.ones((1, 1))})
        np.testing.assert_array_equal(g.backward()["unused"], np.zeros((2, 2)))

    def test_zero_cotangent_gives_zero_gradients(self):
        g, _, inputs = attention_graph(seed=7)
        g.forward(inputs)
        grads = g.backward(np.zeros(()))
        assert set(grads) == {"W_Q", "W_K", "W_V"}
        for value in grads.values():
            np.testing.assert_array_equal(value, np.zeros_like(value))

    def test_constants_only_graph(self):
        g = Graph()
        g.half_squared_norm(g.constant(np.array([[1.0, 2.0], [3.0, 4.0]])))
        assert float(g.forward()) == pytest.approx(15.0)
        assert g.backward() == {}

    def test_gradients_invariant_under_token_permutation(self):
        perm = np.array([4, 2, 0, 1, 3])
        g, _, inputs = attention_graph(n=5, seed=8)
        g.forward(inputs)
        grads = g.backward()
        g.forward({"X": inputs["X"][perm]})
        permuted = g.backward()
        for name, value in grads.items():
            np.testing.assert_allclose(permuted[name], value, atol=1e-12, rtol=1e-12)

    def test_cross_entropy_gradient(self):
        g = Graph()
        logits = g.parameter("logits", [[0.2, -0.4, 1.0]])
        label = g.input("label", ())
        g.softmax_cross_entropy(logits, label)
        g.forward({"label": np.asarray(2)})
        p = np.exp([0.2, -0.4, 1.0])
        p /= p.sum()
        np.testing.assert_allclose(g.backward()["logits"][0], p - [0.0, 0.0, 1.0], rtol=1e-12)


# ════════════════════════════════════════════════════════════════
# attention_block
# ════════════════════════════════════════════════════════════════


class TestAttentionBlock:
    @pytest.mark.parametrize("iterations", [1, 2, 3, 5])
    def test_kernel_matches_sinkhorn(self, iterations):
        g, kernel, inputs = attention_graph(iterations=iterations, seed=1)
        g.forward(inputs)
        p = AttentionParams(g.parameters["W_Q"], g.parameters["W_K"], g.parameters["W_V"])
        expected = sinkhorn(dot_cost(p, inputs["X"]), iterations=iterations).K
        np.testing.assert_allclose(g.value(kernel), expected, atol=1e-13)

    def test_zero_iterations_rejected(self):
        g = Graph()
        x = g.input("X", (3, 2))
        W = g.parameter("W", np.eye(2))
        with pytest.raises(InvalidParameterError):
            attention_block(g, x, W, W, W, 0)


# ════════════════════════════════════════════════════════════════
# grad_check
# ════════════════════════════════════════════════════════════════


class TestGradCheck:
    @pytest.mark.parametrize("iterations", [1, 3, 5, 21])
    def test_unrolled_attention(self, iterations):
        g, _, inputs = attention_graph(iterations=iterations, seed=2)
        report = grad_check(g, inputs, tolerance=1e-5)
        assert report.passed
        assert report.max_rel_error <= 1e-5

    @pytest.mark.parametrize("iterations", [1, 3, 21])
    def test_full_classifier(self, iterations):
        data = synth_dataset("ring_vs_blob", 1, 8, seed=3)
        model = SetClassifier(
            8, hidden=8, normalization=NormalizationSpec.sinkhorn(iterations), rng=SeededRng(3), init_scale=0.5
        )
        report = grad_check(model.graph, {"X": data.X[0], "label": data.y[0]}, tolerance=1e-5)
        assert report.max_rel_error <= 1e-5
        assert set(report.per_parameter) == {"W_Q", "W_K", "W_V", "W_1", "b_1", "W_2", "b_2"}

    def test_parameters_restored(self):
        g, _, inputs = attention_graph(seed=4)
        before = {k: v.copy() for k, v in g.parameters.items()}
        grad_check(g, inputs)
        for name, value in g.parameters.items():
            np.testing.assert_array_equal(value, before[name])

    def test_detects_corrupted_adjoint(self, monkeypatch):
        monkeypatch.setitem(autodiff.VJP_RULES, "exp", lambda node, g, out, a: (2.0 * g * out,))
        g, _, inputs = attention_graph(seed=5)
        report = grad_check(g, inputs, tolerance=1e-5)
        assert not report.passed

    def test_coordinate_cap(self):
        g, _, inputs = attention_graph(d=3, seed=6)
        report = grad_check(g, inputs, coordinates=4)
        assert all(count == 4 for count in report.coordinates.values())

    def test_non_scalar_output_rejected(self):
        g = Graph()
        x = g.input("x", (2, 2))
        g.matmul(x, g.parameter("W", np.eye(2)))
        with pytest.raises(ShapeMismatchError):
            grad_check(g, {"x": np.eye(2)})
