import io
import json
import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from asem import game
from asem import nn_models as nn
from asem.errors import ConfigError, DimensionError, NonFiniteError, StreamExhausted
from asem.generators import IvDesign, PanelDesign, gen_iv, gen_panel
from asem.samples import Sample, SampleBatch
from conftest import fd_gradient

X = np.array([0.5])


def scalar_net(w, radius=10.0):
    """d = m = 1 net with output sign +1, so forward(x) = relu(w x)."""
    base = nn.init_network("two_layer", nn.TwoLayerConfig(1, 1, radius), 0)
    s = nn.NetworkState("two_layer", base.config, 0, np.array([float(w)]), np.array([float(w)]), output_signs=np.ones(1))
    return s


def single(b=0.5):
    return Sample(((1.0, X),), X, b)


class TestPayoff:
    def test_residual_examples(self):
        f = scalar_net(2.0)  # f(0.5) = 1
        assert game.residual(f, single(0.5)) == 0.5
        two = scalar_net(4.0)  # f = 2 on both points
        assert game.residual(two, Sample(((1.0, X), (-1.0, X)), X, 0.0)) == 0.0
        pts = Sample(((1.0, np.array([0.75])), (-1.0, np.array([0.25]))), X, 0.5)
        assert game.residual(scalar_net(4.0), pts) == pytest.approx(1.5, abs=1e-15)

    def test_payoff_examples(self):
        f, u = scalar_net(2.0), scalar_net(4.0)
        assert game.payoff(f, u, single(), 0.0) == -1.0
        assert game.payoff(f, u, single(), 2.0) == 0.0
        assert game.payoff(f, scalar_net(-1.0), single(), 0.0) == 0.0

    def test_grad_examples(self, two_layer):
        th, om = two_layer(d=2, m=8, seed=1), two_layer(d=2, m=8, seed=2)
        x1, x2 = np.array([0.3, -0.2]), np.array([-0.4, 0.1])
        s = Sample(((1.0, x1),), x2, 0.2)
        zero_u = scalar_net(-1.0)
        assert_array_equal(game.grad_theta(scalar_net(2.0), zero_u, single(), 0.0), 0.0)
        u = nn.forward(om, x2)
        assert_allclose(game.grad_theta(th, om, s, 0.0), u * nn.gradient(th, x1), rtol=1e-15)

    def test_grad_omega_examples(self):
        # residual equals u: inner stationarity
        f, u = scalar_net(3.0), scalar_net(1.0)  # f = 1.5, u = 0.5
        assert_array_equal(game.grad_omega(f, u, single(1.0), 0.3), 0.0)
        assert_allclose(game.grad_omega(f, u, single(0.0), 0.0), [0.5], rtol=1e-15)

    def test_dimension_mismatch(self, two_layer):
        th = two_layer(d=3)
        s = Sample(((1.0, np.zeros(2)),), np.zeros(2), 0.0)
        for fn in (game.payoff, game.grad_theta, game.grad_omega):
            with pytest.raises(DimensionError):
                fn(th, th, s, 0.1)
        with pytest.raises(DimensionError):
            game.residual(th, s)

    @pytest.mark.parametrize("arch", ["two_layer", "multi_layer"])
    def test_gradients_match_fd(self, arch, two_layer, deep):
        make = two_layer if arch == "two_layer" else deep
        th, om = make(d=3, seed=3), make(d=3, seed=4)
        rng = np.random.default_rng(0)
        pts = rng.normal(size=(3, 3))
        pts /= 2 * np.linalg.norm(pts, axis=1, keepdims=True)
        s = Sample(((0.7, pts[0]), (-0.4, pts[1])), pts[2], 0.3, ridge_index=1)
        alpha = 0.25
        g_t = game.grad_theta(th, om, s, alpha)
        fd_t = fd_gradient(lambda w: game.payoff(th.with_weights(w), om, s, alpha), th.weights.copy())
        g_o = game.grad_omega(th, om, s, alpha)
        fd_o = fd_gradient(lambda w: game.payoff(th, om.with_weights(w), s, alpha), om.weights.copy())
        assert np.linalg.norm(g_t - fd_t) <= 1e-6 * np.linalg.norm(g_t)
        assert np.linalg.norm(g_o - fd_o) <= 1e-6 * np.linalg.norm(g_o)


class TestGameConfig:
    def test_default_stride(self):
        assert game.GameConfig(0.1, 0.1, 100).snapshot_stride == 1
        c = game.GameConfig(0.1, 0.1, 5000)
        assert c.snapshot_stride == 10 and c.n_snapshots == 500
        assert game.GameConfig(0.1, 0.1, 513).n_snapshots <= 512

    @pytest.mark.parametrize(
        "kw", [dict(alpha=-1.0), dict(eta=-0.1), dict(T=0), dict(T=2.5), dict(snapshot_stride=0), dict(batch_size=0), dict(alpha=np.nan)]
    )
    def test_invalid(self, kw):
        args = dict(alpha=0.1, eta=0.1, T=10) | kw
        with pytest.raises(ConfigError):
            game.GameConfig(**args)


@pytest.fixture
def iv_run(two_layer):
    def make(T=200, eta=0.05, alpha=0.1, stride=1, m=16, B=1.0, use_numba=None, bs=1, data=None):
        th, om = two_layer(d=2, m=m, B=B, seed=1), two_layer(d=2, m=m, B=B, seed=2)
        data = gen_iv(IvDesign(dim=2), T * bs, 5) if data is None else data
        cfg = game.GameConfig(alpha, eta, T, snapshot_stride=stride, batch_size=bs)
        return game.sgda_run(th, om, cfg, data, use_numba=use_numba), th, om, data

    return make


class TestSgda:
    def test_zero_step(self, iv_run):
        tr, th, om, _ = iv_run(eta=0.0)
        assert_array_equal(tr.theta.weights, th.weights)
        assert_array_equal(tr.omega.weights, om.weights)

    def test_single_step(self, iv_run):
        tr, th, om, data = iv_run(T=1, eta=0.01, B=100.0)
        s = data[0]
        assert_allclose(tr.theta.weights, th.weights - 0.01 * game.grad_theta(th, om, s, 0.1), rtol=1e-13, atol=1e-16)
        assert_allclose(tr.omega.weights, om.weights + 0.01 * game.grad_omega(th, om, s, 0.1), rtol=1e-13, atol=1e-16)
        assert tr.log[0, 1] == pytest.approx(game.payoff(th, om, s, 0.1), rel=1e-13)

    def test_deterministic(self, iv_run):
        a, b = iv_run()[0], iv_run()[0]
        assert a.theta.weights.tobytes() == b.theta.weights.tobytes()
        assert a.log.tobytes() == b.log.tobytes()

    def test_feasible(self, iv_run):
        tr, th, om, _ = iv_run(T=300, eta=1.0, B=0.05)
        assert np.all(tr.log[:, 4] <= 0.05 * (1 + 1e-12))
        assert np.all(tr.log[:, 5] <= 0.05 * (1 + 1e-12))
        assert tr.log[:, 4].max() == pytest.approx(0.05)

    def test_snapshots(self, iv_run):
        tr, th, _, _ = iv_run(T=25, stride=4)
        assert_array_equal(tr.snapshot_iters, [4, 8, 12, 16, 20, 24])
        # snapshot at step 1 with stride 1 is the initialization
        tr1, th1, _, _ = iv_run(T=3, stride=1)
        assert_array_equal(tr1.theta_snapshots[0].weights, th1.weights)

    def test_backends_agree(self, iv_run):
        a = iv_run(use_numba=True)[0]
        b = iv_run(use_numba=False)[0]
        assert_allclose(a.theta.weights, b.theta.weights, rtol=1e-12, atol=1e-14)
        assert_allclose(a.log, b.log, rtol=1e-10, atol=1e-13)

    def test_generic_path_agrees(self, two_layer):
        # unequal widths route through the generic loop; compare against the kernel on equal widths
        th, om = two_layer(d=2, m=8, seed=1), two_layer(d=2, m=8, seed=2)
        data = gen_iv(IvDesign(dim=2), 50, 0)
        cfg = game.GameConfig(0.1, 0.05, 50, snapshot_stride=1)
        kern = game.sgda_run(th, om, cfg, data)
        status, W, V, sf, su = game._sgda_generic(th, om, cfg, data, np.zeros((50, 6)))
        assert status == -1
        assert_allclose(W, kern.theta.weights, rtol=1e-12, atol=1e-14)
        assert_allclose(np.array(sf).reshape(50, -1), np.array([s.weights for s in kern.theta_snapshots]), atol=1e-14)

    def test_deep_runs(self, deep):
        th, om = deep(d=2, m=6, seed=1), deep(d=2, m=6, seed=2)
        tr = game.sgda_run(th, om, game.GameConfig(0.1, 0.01, 20), gen_iv(IvDesign(dim=2), 20, 0))
        assert tr.backend == "generic" and np.all(np.isfinite(tr.log))
        per_layer = np.linalg.norm((tr.theta.weights - th.init_weights).reshape(2, -1), axis=1)
        assert np.all(per_layer <= th.radius * (1 + 1e-12))

    def test_panel_minibatch(self, iv_run):
        data = gen_panel(PanelDesign(n_units=40, n_periods=5, regressor_dim=1), 0)
        tr = iv_run(T=40, bs=3, data=data)[0]
        assert tr.log.shape == (40, 6)

    def test_stream_exhausted(self, iv_run, two_layer):
        with pytest.raises(StreamExhausted):
            iv_run(T=100, data=gen_iv(IvDesign(dim=2), 99, 0))
        th = two_layer(d=2)
        gen = iter(gen_iv(IvDesign(dim=2), 5, 0))
        with pytest.raises(StreamExhausted):
            game.sgda_run(th, th, game.GameConfig(0.1, 0.1, 6), gen)

    def test_iterable_stream(self, iv_run, two_layer):
        data = gen_iv(IvDesign(dim=2), 30, 0)
        a = iv_run(T=30, data=data)[0]
        b = iv_run(T=30, data=iter(list(data)))[0]
        assert_array_equal(a.theta.weights, b.theta.weights)

    def test_non_finite(self, two_layer):
        th = two_layer(d=1, m=4, B=1e300)
        th = th.with_weights(th.weights * 1e200)
        object.__setattr__(th, "init_weights", th.weights)
        s = SampleBatch(np.ones((3, 1)), np.ones((3, 1, 1)) * 0.5, np.ones((3, 1)) * 0.5, np.zeros(3))
        with pytest.raises(NonFiniteError) as err:
            game.sgda_run(th, th, game.GameConfig(0.0, 1.0, 3), s)
        assert err.value.iteration >= 1

    def test_infeasible_start_and_mixed_arch(self, two_layer, deep):
        th = two_layer(d=2, B=0.1)
        far = th.with_weights(th.weights + 1.0)
        data = gen_iv(IvDesign(dim=2), 5, 0)
        with pytest.raises(ConfigError):
            game.sgda_run(far, th, game.GameConfig(0.1, 0.1, 5), data)
        with pytest.raises(ConfigError):
            game.sgda_run(th, deep(d=2), game.GameConfig(0.1, 0.1, 5), data)
        with pytest.raises(DimensionError):
            game.sgda_run(two_layer(d=3), two_layer(d=3), game.GameConfig(0.1, 0.1, 5), data)

    def test_gradient_norm_bound(self, iv_run):
        # single-point IV samples with ||x|| <= 1 give ||grad_theta|| <= |u(x2)| + alpha |f(x1)|
        tr, _, _, data = iv_run(T=100, eta=0.1, stride=1)
        for t in range(100):
            s = data[t]
            u = nn.forward(tr.omega_snapshots[t], s.x2)
            f = nn.forward(tr.theta_snapshots[t], s.eval_points[0][1])
            assert tr.log[t, 2] <= abs(u) + 0.1 * abs(f) + 1e-12


class TestTraceIO:
    def test_csv(self, iv_run):
        tr, *_ = iv_run(T=5)
        text = tr.to_csv()
        lines = text.splitlines()
        assert lines[0] == ",".join(game.TRACE_COLUMNS)
        back = np.loadtxt(io.StringIO(text), delimiter=",", skiprows=1)
        assert back.tobytes() == tr.log.tobytes()
        buf = io.StringIO()
        assert tr.to_csv(buf) is None and buf.getvalue() == text

    def test_export_snapshots(self, iv_run, tmp_path):
        tr, *_ = iv_run(T=6, stride=3)
        paths = tr.export_snapshots(str(tmp_path))
        assert [os.path.basename(p) for p in paths] == ["theta_3.json", "theta_6.json"]
        back = nn.state_from_json(open(paths[1]).read())
        assert_array_equal(back.weights, tr.theta_snapshots[1].weights)


class TestAveraging:
    def test_single_and_mean(self):
        a, b = scalar_net(2.0), scalar_net(6.0)  # outputs 1 and 3 at x = 0.5
        assert game.AveragedEstimator([a])(X) == nn.forward(a, X)
        est = game.AveragedEstimator([a, b])
        assert est(X) == 2.0
        assert_array_equal(est.evaluate(np.array([[0.5], [0.25]])), [2.0, 1.0])
        assert est.evaluate_each(X).shape == (2, 1)

    def test_empty_and_mixed(self, two_layer):
        with pytest.raises(ConfigError):
            game.AveragedEstimator([])
        with pytest.raises(ConfigError):
            game.AveragedEstimator([two_layer(m=4), two_layer(m=8)])

    def test_function_average_not_weight_average(self):
        est = game.AveragedEstimator([scalar_net(2.0), scalar_net(-2.0)])
        assert est(X) == 0.5
        assert nn.forward(scalar_net(0.0), X) == 0.0

    def test_stride_close_to_full_average(self, iv_run):
        full = game.average_estimator(iv_run(T=2000, eta=0.02, stride=1)[0])
        sub = game.average_estimator(iv_run(T=2000, eta=0.02, stride=10)[0])
        grid = np.random.default_rng(0).uniform(-0.5, 0.5, size=(50, 2))
        a, b = full.evaluate(grid), sub.evaluate(grid)
        assert np.max(np.abs(a - b)) <= 0.05 * max(np.max(np.abs(a)), 1e-3)
