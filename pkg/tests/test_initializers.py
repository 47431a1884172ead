"""Initializer tests: Glorot moments, determinism, orthonormality, and the
unit-variance procedure's convergence and failure contracts."""

import numpy as np
import pytest

from ircnn.errors import ConfigError, InitializationError
from ircnn.graph import INPUT, LayerGraph
from ircnn.initializers import init_baseline, lsuv_init, orthonormalize_kernels
from ircnn.models import build_model, preset_tiny
from ircnn.ops import ConvSpec


def single_conv_graph(ci=8, co=16, dtype=np.float64):
    g = LayerGraph(dtype=dtype)
    g.add("c", "conv", INPUT, spec=ConvSpec(kernel=(3, 3), out_channels=co), bias=True)
    g.add("r", "relu", "c")
    g.add("gap", "gap", "r")
    g.add("head", "conv", "gap", spec=ConvSpec(kernel=(1, 1), out_channels=4), bias=True)
    g.add("loss", "softmax_xent", "head")
    g.set_param("c.w", np.zeros((co, ci, 3, 3)))
    g.set_param("c.b", np.zeros(co))
    g.set_param("head.w", np.zeros((4, co, 1, 1)))
    g.set_param("head.b", np.zeros(4))
    g.validate()
    return g


class TestBaseline:
    def test_biases_exactly_zero(self):
        g = build_model(preset_tiny())
        init_baseline(g, seed=3)
        for name, p in g.params.items():
            if name.endswith(".b"):
                assert not p.any(), name

    def test_same_seed_bit_identical(self):
        g1, g2 = build_model(preset_tiny()), build_model(preset_tiny())
        init_baseline(g1, seed=42)
        init_baseline(g2, seed=42)
        for name in g1.params:
            np.testing.assert_array_equal(g1.params[name], g2.params[name])

    def test_different_seed_differs(self):
        g1, g2 = build_model(preset_tiny()), build_model(preset_tiny())
        init_baseline(g1, seed=1)
        init_baseline(g2, seed=2)
        assert any(not np.array_equal(g1.params[n], g2.params[n]) for n in g1.params)

    def test_glorot_variance(self):
        # uniform(-a, a) has variance a^2/3 = 2/(fan_in + fan_out)
        g = single_conv_graph(ci=64, co=64)
        init_baseline(g, seed=0)
        w = g.params["c.w"]
        fan_in, fan_out = 64 * 9, 64 * 9
        expected = 2.0 / (fan_in + fan_out)
        assert abs(float(w.var()) - expected) / expected < 0.10


class TestOrthonormalize:
    def test_rows_orthonormal_when_possible(self):
        g = single_conv_graph(ci=8, co=16)  # fan_in = 72 >= co = 16
        orthonormalize_kernels(g, seed=0)
        m = g.params["c.w"].reshape(16, -1)
        np.testing.assert_allclose(m @ m.T, np.eye(16), atol=1e-10)

    def test_columns_orthonormal_when_wide(self):
        # stem-like case: out_channels exceeds fan_in
        g = LayerGraph(dtype=np.float64)
        g.add("c", "conv", INPUT, spec=ConvSpec(kernel=(3, 3), out_channels=12), bias=True)
        g.add("gap", "gap", "c")
        g.add("loss", "softmax_xent", "gap")
        g.set_param("c.w", np.zeros((12, 1, 3, 3)))
        g.set_param("c.b", np.zeros(12))
        orthonormalize_kernels(g, seed=0)
        m = g.params["c.w"].reshape(12, 9)
        np.testing.assert_allclose(m.T @ m, np.eye(9), atol=1e-10)


class TestLsuv:
    def test_single_conv_converges(self, rng):
        g = single_conv_graph()
        probe = rng.standard_normal((64, 8, 7, 7))
        report = lsuv_init(g, probe)
        assert report.all_converged
        for layer in report.layers:
            assert 0.99 <= layer.variance <= 1.01
            assert layer.iterations <= 10

    def test_rescale_preserves_direction(self, rng):
        g = single_conv_graph()
        orthonormalize_kernels(g, seed=0)
        before = {n: p.copy() for n, p in g.params.items() if not n.endswith(".b")}
        g2 = single_conv_graph()
        lsuv_init(g2, rng.standard_normal((64, 8, 7, 7)), seed=0)
        for name, w0 in before.items():
            w1 = g2.params[name]
            ratio = w1[w0 != 0] / w0[w0 != 0]
            np.testing.assert_allclose(ratio, ratio.flat[0], rtol=1e-9)

    def test_tiny_preset_probe_all_converged(self, rng):
        g = build_model(preset_tiny(in_channels=1), dtype=np.float64)
        probe = rng.standard_normal((128, 1, 14, 14))
        report = lsuv_init(g, probe)
        visited = {l.node_id for l in report.layers}
        conv_rcl = {nid for nid, n in g.nodes.items() if n.kind in ("conv", "rcl")}
        assert visited == conv_rcl
        assert report.all_converged
        assert all(0.99 <= l.variance <= 1.01 for l in report.layers)

    def test_dead_layer_raises_with_node_name(self):
        g = single_conv_graph()
        probe = np.zeros((64, 8, 7, 7))  # zero input -> zero pre-activation
        with pytest.raises(InitializationError, match="c"):
            lsuv_init(g, probe)

    def test_small_probe_rejected(self, rng):
        g = single_conv_graph()
        with pytest.raises(ConfigError, match="64"):
            lsuv_init(g, rng.standard_normal((32, 8, 7, 7)))
