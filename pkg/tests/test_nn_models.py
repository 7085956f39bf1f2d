import json
import math
import warnings

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from asem import nn_models as nn
from asem.errors import ConfigError, DimensionError
from conftest import fd_gradient


def _manual(arch_state, W, signs=None):
    """Two-layer state with hand-set weights and signs."""
    s = arch_state.with_weights(np.asarray(W, float).ravel())
    if signs is not None:
        object.__setattr__(s, "output_signs", np.asarray(signs, float))
    return s


@pytest.fixture
def tiny():
    base = nn.init_network("two_layer", nn.TwoLayerConfig(1, 1, 10.0), 0)
    return lambda W, W0=None: _manual(
        base if W0 is None else nn.NetworkState(
            "two_layer", base.config, 0, np.array(W0, float), np.array(W0, float), output_signs=np.ones(1)
        ),
        W,
        [1.0],
    )


class TestConfig:
    @pytest.mark.parametrize("args", [(0, 4, 1.0), (4, 0, 1.0), (4, 4, 0.0), (4, 4, -1.0), (4, 4, math.inf)])
    def test_invalid_two_layer(self, args):
        with pytest.raises(ConfigError):
            nn.TwoLayerConfig(*args)

    def test_overflowing_size(self):
        with pytest.raises(ConfigError):
            nn.TwoLayerConfig(1 << 20, 1 << 20, 1.0)
        with pytest.raises(ConfigError):
            nn.DeepConfig(2, 1 << 16, 4, 1.0)

    def test_deep_width_warning(self):
        with pytest.warns(RuntimeWarning):
            nn.DeepConfig(2, 16, 2, 10.0)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            nn.DeepConfig(2, 1 << 14, 1, 1.0)

    def test_wrong_config_type(self):
        with pytest.raises(ConfigError):
            nn.init_network("two_layer", nn.DeepConfig(2, 1 << 14, 1, 1.0), 0)
        with pytest.raises(ConfigError):
            nn.init_network("resnet", nn.TwoLayerConfig(2, 2, 1.0), 0)


class TestInit:
    def test_single_neuron(self):
        s = nn.init_network("two_layer", nn.TwoLayerConfig(1, 1, 1.0), 3)
        assert abs(s.output_signs[0]) == 1.0
        assert_array_equal(s.weights, s.init_weights)

    def test_row_variance(self):
        s = nn.init_network("two_layer", nn.TwoLayerConfig(4, 10000, 1.0), 7)
        assert 0.2 <= s.init_weights.var() <= 0.3

    def test_deep_scales(self, deep):
        s = deep(d=4, m=200, H=2, seed=5)
        assert_allclose(s.init_weights.var(), 2.0, rtol=0.05)
        assert_allclose(s.input_embed.var(), 2.0, rtol=0.15)
        assert s.output_vec.shape == (200,)

    def test_determinism(self):
        cfg = nn.TwoLayerConfig(3, 50, 1.0)
        a, b = nn.init_network("two_layer", cfg, 11), nn.init_network("two_layer", cfg, 11)
        assert a.init_weights.tobytes() == b.init_weights.tobytes()
        assert a.output_signs.tobytes() == b.output_signs.tobytes()
        c = nn.init_network("two_layer", cfg, 12)
        assert not np.array_equal(a.init_weights, c.init_weights)

    def test_frozen_arrays(self, two_layer):
        s = two_layer()
        with pytest.raises(ValueError):
            s.init_weights[0] = 1.0
        with pytest.raises(ValueError):
            s.output_signs[0] = 1.0

    def test_signs_are_rademacher(self, two_layer):
        s = two_layer(m=2000)
        assert set(np.unique(s.output_signs)) == {-1.0, 1.0}


class TestForward:
    def test_active(self, tiny):
        assert nn.forward(tiny([2.0]), [0.5]) == 1.0

    def test_inactive(self, tiny):
        assert nn.forward(tiny([-2.0]), [0.5]) == 0.0

    def test_homogeneity(self, two_layer):
        s = two_layer(d=3, m=32, seed=2)
        x = np.array([0.3, -0.2, 0.5])
        assert_allclose(nn.forward(s.with_weights(2.5 * s.weights), x), 2.5 * nn.forward(s, x), rtol=1e-14)

    def test_dimension_mismatch(self, two_layer):
        with pytest.raises(DimensionError):
            nn.forward(two_layer(d=3), [1.0, 2.0])

    def test_evaluate_matches_loop(self, two_layer, deep):
        rng = np.random.default_rng(0)
        X = rng.normal(size=(7, 3))
        for s in (two_layer(d=3), deep(d=3)):
            assert_allclose(nn.evaluate(s, X), [nn.forward(s, x) for x in X], rtol=1e-12, atol=1e-14)
        with pytest.raises(DimensionError):
            nn.evaluate(two_layer(d=3), X[:, :2])

    def test_deep_by_hand(self, deep):
        s = deep(d=2, m=3, H=1, seed=4)
        x = np.array([0.6, -0.8])
        h = np.maximum(s.matrix()[0] @ (s.input_embed @ x), 0) / math.sqrt(3)
        assert_allclose(nn.forward(s, x), s.output_vec @ h, rtol=1e-14)


class TestGradient:
    def test_active(self, tiny):
        assert_array_equal(nn.gradient(tiny([2.0]), [0.5]), [0.5])

    def test_inactive(self, tiny):
        assert_array_equal(nn.gradient(tiny([-2.0]), [0.5]), [0.0])

    @pytest.mark.parametrize("kind", ["two", "deep"])
    def test_finite_differences(self, kind, two_layer, deep):
        rng = np.random.default_rng(1)
        s = two_layer(d=3, m=12, seed=3) if kind == "two" else deep(d=3, m=6, H=2, seed=3)
        s = nn.sample_in_ball(s, rng)
        for _ in range(20):
            x = rng.normal(size=3)
            x /= np.linalg.norm(x)
            if kind == "two" and np.min(np.abs(s.matrix() @ x)) < 1e-3:
                continue
            g = nn.gradient(s, x)
            fd = fd_gradient(lambda w: nn.forward(s.with_weights(w), x), s.weights)
            assert np.linalg.norm(g - fd) <= 1e-6 * max(1.0, np.linalg.norm(g))

    def test_zero_preactivation_gives_zero(self):
        base = nn.init_network("two_layer", nn.TwoLayerConfig(2, 1, 1.0), 0)
        s = base.with_weights(np.array([1.0, -1.0]))
        assert_array_equal(nn.gradient(s, [0.5, 0.5]), [0.0, 0.0])


class TestProjection:
    def test_radial(self):
        s = nn.NetworkState(
            "two_layer", nn.TwoLayerConfig(2, 1, 1.0), 0, np.array([3.0, 4.0]), np.zeros(2), output_signs=np.ones(1)
        )
        assert_allclose(nn.project(s).weights, [0.6, 0.8], rtol=1e-15)

    def test_inside_unchanged(self, two_layer):
        s = two_layer(B=1.0)
        t = s.with_weights(s.init_weights + 0.01)
        assert nn.project(t) is t

    def test_idempotent_and_flat(self, two_layer, deep):
        rng = np.random.default_rng(3)
        for s in (two_layer(B=0.5), deep(B=0.5)):
            t = s.with_weights(s.init_weights + rng.normal(size=s.weights.size))
            p = nn.project(t)
            assert_allclose(nn.project(p).weights, p.weights, rtol=0, atol=1e-15)
            assert_allclose(nn.project_flat(s.arch, s.config, t.weights, s.init_weights), p.weights)

    def test_deep_per_layer(self, deep):
        s = deep(d=2, m=4, H=3, B=0.5)
        delta = np.zeros(s.weights.size)
        delta[:16] = 10.0  # only the first layer leaves its ball
        p = nn.project(s.with_weights(s.init_weights + delta))
        norms = np.linalg.norm((p.weights - s.init_weights).reshape(3, -1), axis=1)
        assert_allclose(norms, [0.5, 0.0, 0.0], atol=1e-14)


class TestLinearization:
    def test_at_init(self, two_layer, deep):
        x = np.array([0.1, 0.7, -0.2])
        for s in (two_layer(), deep()):
            assert_allclose(nn.linearized_forward(s, x), nn.forward(s, x), rtol=1e-13, atol=1e-15)

    def test_same_pattern(self, tiny):
        s = tiny([1.5], W0=[1.0])
        assert nn.linearized_forward(s, [1.0]) == 1.5 == nn.forward(s, [1.0])

    def test_vectorized(self, two_layer, deep):
        rng = np.random.default_rng(5)
        X = rng.normal(size=(5, 3))
        for s in (two_layer(), deep()):
            s = nn.sample_in_ball(s, rng)
            assert_allclose(nn.evaluate_linearized(s, X), [nn.linearized_forward(s, x) for x in X], rtol=1e-12, atol=1e-14)

    def test_gap_shrinks_with_width(self):
        rows = nn.linearization_gap(nn.two_layer_factory(4, 1.0), [64, 4096], 300, 0)
        assert rows[1][1] < rows[0][1] and rows[1][2] < rows[0][2]

    def test_tiny_radius(self):
        rows = nn.linearization_gap(nn.two_layer_factory(4, 1e-9), [16, 32], 100, 0)
        for _, v, g in rows:
            assert v <= 1e-12 and g <= 1e-12

    def test_deterministic(self):
        f = nn.multi_layer_factory(3, 2, 0.5)
        assert nn.linearization_gap(f, [8, 16], 100, 4) == nn.linearization_gap(f, [8, 16], 100, 4)

    @pytest.mark.parametrize("grid,n", [([], 100), ([64, 32], 100), ([64], 10)])
    def test_validation(self, grid, n):
        with pytest.raises(ConfigError):
            nn.linearization_gap(nn.two_layer_factory(2, 1.0), grid, n, 0)


class TestSerialization:
    @pytest.mark.parametrize("binary", [False, True])
    def test_roundtrip(self, two_layer, deep, binary):
        rng = np.random.default_rng(8)
        for s in (two_layer(), deep()):
            s = nn.sample_in_ball(s, rng)
            doc = json.loads(json.dumps(nn.state_to_dict(s, binary=binary)))
            t = nn.state_from_dict(doc)
            assert t.weights.tobytes() == s.weights.tobytes()
            assert t.init_weights.tobytes() == s.init_weights.tobytes()
            assert "W0" not in doc

    def test_json_and_bytes(self, two_layer):
        s = two_layer()
        assert nn.state_from_json(nn.state_to_json(s)).weights.tobytes() == s.weights.tobytes()
        assert_array_equal(nn.weights_from_bytes(nn.weights_to_bytes(s)), s.weights)
        assert len(nn.weights_to_bytes(s)) == 8 * s.weights.size

    def test_bad_weights_shape(self, two_layer):
        with pytest.raises(DimensionError):
            two_layer().with_weights(np.zeros(3))
