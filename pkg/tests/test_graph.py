"""Graph-engine tests: composition, full-graph finite-difference checks on a
model with every layer kind, determinism, and validation errors."""

import numpy as np
import pytest

from ircnn.errors import ConfigError, IrcnnError
from ircnn.graph import INPUT, LayerGraph
from ircnn.layers import LrnAttrs, softmax_xent
from ircnn.ops import ConvSpec, conv2d

from conftest import finite_difference, max_rel_err


def tiny_graph(dtype=np.float64, dropout_rate=0.0):
    """A graph touching every node kind once (dropout at configurable rate)."""
    g = LayerGraph(dtype=dtype)
    g.add("stem", "conv", INPUT, spec=ConvSpec(kernel=(3, 3), out_channels=4), bias=True)
    g.add("stem_relu", "relu", "stem")
    g.add("pool_a", "avgpool", "stem_relu", stride=(1, 1), padding="same")
    g.add("rc1", "rcl", "pool_a", spec=ConvSpec(kernel=(1, 1), out_channels=3), t=2)
    g.add("rc2", "rcl", "stem_relu", spec=ConvSpec(kernel=(3, 3), out_channels=3), t=1)
    g.add("norm1", "lrn", "rc1", lrn=LrnAttrs(depth_radius=1, alpha=0.02))
    g.add("norm2", "lrn", "rc2", lrn=LrnAttrs(depth_radius=1, alpha=0.02))
    g.add("cat", "concat", ["norm1", "norm2"])
    g.add("drop", "dropout", "cat", rate=dropout_rate)
    g.add("short", "conv", "stem_relu", spec=ConvSpec(kernel=(1, 1), out_channels=6),
          bias=False)
    g.add("res", "residual_add", ["drop", "short"])
    g.add("mp", "maxpool", "res", stride=(2, 2), padding="same")
    g.add("gap", "gap", "mp")
    g.add("head", "conv", "gap", spec=ConvSpec(kernel=(1, 1), out_channels=5), bias=True)
    g.add("loss", "softmax_xent", "head")

    rng = np.random.default_rng(77)
    shapes = {
        "stem.w": (4, 2, 3, 3), "stem.b": (4,),
        "rc1.w_f": (3, 4, 1, 1), "rc1.w_r": (3, 3, 1, 1), "rc1.b": (3,),
        "rc2.w_f": (3, 4, 3, 3), "rc2.w_r": (3, 3, 3, 3), "rc2.b": (3,),
        "short.w": (6, 4, 1, 1),
        "head.w": (5, 6, 1, 1), "head.b": (5,),
    }
    for name, shape in shapes.items():
        g.set_param(name, rng.standard_normal(shape) * 0.5)
    g.validate()
    return g


class TestForward:
    def test_conv_softmax_composition(self, rng):
        g = LayerGraph(dtype=np.float64)
        spec = ConvSpec(kernel=(1, 1), out_channels=4)
        g.add("c", "conv", INPUT, spec=spec, bias=True)
        g.add("gap", "gap", "c")
        g.add("loss", "softmax_xent", "gap")
        w = rng.standard_normal((4, 3, 1, 1))
        b = rng.standard_normal(4)
        g.set_param("c.w", w)
        g.set_param("c.b", b)
        g.validate()

        x = rng.standard_normal((2, 3, 1, 1))
        labels = np.array([1, 3])
        run = g.forward(x, labels, mode="infer")
        expected_logits = conv2d(x, w, b, spec)
        np.testing.assert_allclose(run.logits, expected_logits, rtol=1e-12)
        loss, probs, _ = softmax_xent(expected_logits, labels)
        assert run.loss == pytest.approx(loss, rel=1e-12)
        np.testing.assert_allclose(run.probs, probs, rtol=1e-12)

    def test_train_mode_deterministic_given_seed(self, rng):
        g = tiny_graph(dropout_rate=0.4)
        x = rng.standard_normal((2, 2, 6, 6))
        labels = np.array([0, 2])
        l1, a1, _ = g.forward_backward(x, labels, rng=np.random.default_rng(5))
        l2, a2, _ = g.forward_backward(x, labels, rng=np.random.default_rng(5))
        assert l1 == l2 and a1 == a2

    def test_infer_mode_dropout_identity_no_grads(self, rng):
        g = tiny_graph(dropout_rate=0.9)
        x = rng.standard_normal((2, 2, 6, 6))
        labels = np.array([1, 4])
        loss_a, _, grads = g.forward_backward(x, labels, mode="infer")
        loss_b, _, _ = g.forward_backward(x, labels, mode="infer")
        assert grads is None
        assert loss_a == loss_b  # no stochastic masks in infer mode

    def test_logits_available_without_labels(self, rng):
        g = tiny_graph()
        run = g.forward(rng.standard_normal((1, 2, 6, 6)), mode="infer")
        assert run.logits.shape == (1, 5, 1, 1)
        assert run.loss is None


class TestBackward:
    def test_full_graph_matches_finite_differences(self, rng):
        g = tiny_graph()
        x = rng.standard_normal((2, 2, 6, 6)) * 0.8
        labels = np.array([0, 3])
        run = g.forward(x, labels, mode="train")
        grads = g.backward(run)
        assert set(grads) == set(g.params)

        for name in g.params:
            def loss_of(v, name=name):
                saved = g.params[name]
                g.params[name] = v
                try:
                    return g.forward(x, labels, mode="train").loss
                finally:
                    g.params[name] = saved

            fd = finite_difference(loss_of, g.params[name])
            assert max_rel_err(grads[name], fd) < 1e-4, name

    def test_backward_requires_train_mode_and_labels(self, rng):
        g = tiny_graph()
        x = rng.standard_normal((1, 2, 6, 6))
        run = g.forward(x, np.array([0]), mode="infer")
        with pytest.raises(IrcnnError):
            g.backward(run)
        run = g.forward(x, mode="train")
        with pytest.raises(IrcnnError):
            g.backward(run)


class TestValidation:
    def test_cycle_detected(self):
        g = LayerGraph()
        g.add("a", "relu", "b")
        g.add("b", "relu", "a")
        with pytest.raises(ConfigError, match="cycle"):
            g.validate(training=False)

    def test_unknown_input_detected(self):
        g = LayerGraph()
        g.add("a", "relu", "ghost")
        with pytest.raises(ConfigError, match="ghost"):
            g.validate(training=False)

    def test_exactly_one_loss_node(self):
        g = LayerGraph()
        g.add("gap", "gap", INPUT)
        with pytest.raises(ConfigError, match="loss"):
            g.validate(training=True)
        g.add("l1", "softmax_xent", "gap")
        g.add("l2", "softmax_xent", "gap")
        with pytest.raises(ConfigError, match="loss"):
            g.validate(training=True)

    def test_missing_param_detected(self):
        g = LayerGraph()
        g.add("c", "conv", INPUT, spec=ConvSpec(kernel=(1, 1), out_channels=2), bias=True)
        g.add("gap", "gap", "c")
        g.add("loss", "softmax_xent", "gap")
        with pytest.raises(ConfigError, match="c.w"):
            g.validate()

    def test_residual_arity(self):
        g = LayerGraph()
        g.add("r", "residual_add", [INPUT])
        with pytest.raises(ConfigError, match="2 input"):
            g.validate(training=False)

    def test_count_params_breakdown(self, rng):
        g = tiny_graph()
        total, rows = g.count_params()
        assert total == sum(p.size for p in g.params.values())
        assert dict(rows)["stem"] == 4 * 2 * 9 + 4
