import json

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from asem import oracle as orc
from asem.errors import ConfigError, DimensionError
from asem.generators import discrete_iv_design, gen_discrete


def random_pmf(rng, K1, K2):
    P = rng.random((K1, K2)) + 0.05
    return P / P.sum()


def dense_tikhonov(P, b, alpha):
    """Minimize 0.5 ||A f - b||^2_w2 + 0.5 alpha ||f||^2_w1 through its plain Hessian."""
    w1, w2 = P.sum(1), P.sum(0)
    A = P.T / w2[:, None]
    H = A.T @ np.diag(w2) @ A + alpha * np.diag(w1)
    return np.linalg.solve(H, A.T @ (w2 * b))


class TestOperator:
    def test_product_measure(self):
        w1, w2 = np.array([0.2, 0.3, 0.5]), np.array([0.6, 0.4])
        op = orc.operator_from_pmf(np.outer(w1, w2))
        assert_allclose(op.matrix, np.tile(w1, (2, 1)), rtol=1e-14)

    def test_diagonal(self):
        op = orc.operator_from_pmf(np.diag([0.1, 0.2, 0.3, 0.4]))
        assert_array_equal(op.matrix, np.eye(4))

    def test_two_by_two(self):
        # rows of the pmf are X1 states, columns X2 states
        P = np.array([[0.4, 0.1], [0.2, 0.3]]).T
        op = orc.operator_from_pmf(P)
        assert_allclose(op.matrix, [[0.8, 0.2], [0.4, 0.6]], rtol=1e-14)

    def test_constants_fixed_and_norm(self):
        rng = np.random.default_rng(0)
        op = orc.operator_from_pmf(random_pmf(rng, 6, 4))
        assert_allclose(op.apply(np.ones(6)), np.ones(4), rtol=1e-14)
        assert op.norm() <= 1 + 1e-10

    def test_adjoint_identity(self):
        rng = np.random.default_rng(1)
        op = orc.operator_from_pmf(random_pmf(rng, 5, 7))
        f, g = rng.normal(size=5), rng.normal(size=7)
        assert_allclose(np.sum(op.w2 * op.apply(f) * g), np.sum(op.w1 * f * op.adjoint(g)), rtol=1e-12)

    def test_invalid(self):
        with pytest.raises(ConfigError):
            orc.operator_from_pmf(np.array([[0.5, 0.5], [0.0, 0.0]]))
        with pytest.raises(ConfigError):
            orc.operator_from_pmf(np.array([[0.5, 0.6], [0.0, 0.1]]))
        with pytest.raises(DimensionError):
            orc.operator_from_pmf(np.eye(3) / 3).apply(np.ones(2))

    def test_json_roundtrip(self):
        d = discrete_iv_design(K1=5, K2=4)
        op = orc.estimate_operator(d)
        back = orc.DiscretizedOperator.from_json(json.dumps(json.loads(op.to_json())))
        assert back.matrix.tobytes() == op.matrix.tobytes()
        assert_array_equal(back.x1_grid, d.x1_grid)


class TestEstimate:
    def test_exact_from_design(self):
        d = discrete_iv_design(K1=6, K2=5)
        assert_allclose(orc.estimate_operator(d).joint, d.joint_pmf, rtol=1e-12, atol=1e-18)

    def test_empirical_converges(self):
        d = discrete_iv_design(K1=4, K2=4, width=0.5)
        batch = gen_discrete(d, 200_000, 3)
        emp = orc.estimate_operator(batch, (d.x1_grid, d.x2_grid))
        assert np.max(np.abs(emp.matrix - orc.estimate_operator(d).matrix)) < 0.01

    def test_empty_cell(self):
        d = discrete_iv_design(K1=4, K2=4)
        batch = gen_discrete(d, 3, 0)
        with pytest.raises(ConfigError):
            orc.estimate_operator(batch, (d.x1_grid, d.x2_grid))
        with pytest.raises(ConfigError):
            orc.estimate_operator(batch)


class TestTikhonov:
    def test_identity(self):
        op = orc.operator_from_pmf(np.eye(5) / 5)
        b = np.arange(5.0) - 2
        for a in (1e-3, 0.5, 3.0):
            assert_allclose(orc.tikhonov_solve(op, b, a), b / (1 + a), rtol=1e-12, atol=1e-14)

    def test_zero_rhs(self):
        op = orc.operator_from_pmf(random_pmf(np.random.default_rng(2), 4, 3))
        assert_array_equal(orc.tikhonov_solve(op, np.zeros(3), 0.1), np.zeros(4))

    @pytest.mark.parametrize("seed", range(5))
    def test_dense_oracle(self, seed):
        rng = np.random.default_rng(seed)
        P = random_pmf(rng, 8, 8)
        b = rng.normal(size=8)
        op = orc.operator_from_pmf(P)
        f = orc.tikhonov_solve(op, b, 0.3)
        assert_allclose(f, dense_tikhonov(P, b, 0.3), rtol=1e-8, atol=1e-10)
        assert orc.normal_equation_residual(op, f, b, 0.3) <= 1e-10

    def test_alpha_must_be_positive(self):
        op = orc.operator_from_pmf(np.eye(2) / 2)
        for a in (0.0, -1.0):
            with pytest.raises(ConfigError):
                orc.tikhonov_solve(op, np.ones(2), a)

    def test_monotone_norm_and_limit(self):
        rng = np.random.default_rng(4)
        P = random_pmf(rng, 5, 5) + np.eye(5)
        op = orc.operator_from_pmf(P / P.sum())
        b = rng.normal(size=5)
        norms = [orc.wnorm2(orc.tikhonov_solve(op, b, a), op.w1) for a in (1e-3, 1e-2, 1e-1, 1.0)]
        assert all(x >= y for x, y in zip(norms, norms[1:]))
        f_ls = np.linalg.solve(op.matrix, b)
        assert_allclose(orc.tikhonov_solve(op, b, 1e-8), f_ls, rtol=1e-5, atol=1e-5)


class TestSvd:
    def test_identity(self):
        sys_ = orc.svd_system(orc.operator_from_pmf(np.eye(4) / 4))
        assert_allclose(sys_.values, np.ones(4), rtol=1e-14)

    def test_top_pair_is_constant(self):
        op = orc.operator_from_pmf(random_pmf(np.random.default_rng(5), 6, 5))
        s = orc.svd_system(op)
        assert_allclose(s.values[0], 1.0, rtol=1e-12)
        assert_allclose(np.abs(s.phi[0]), np.ones(6), rtol=1e-10)

    def test_reconstruction_and_orthonormality(self):
        op = orc.operator_from_pmf(random_pmf(np.random.default_rng(6), 7, 5))
        s = orc.svd_system(op)
        assert np.all(np.diff(s.values) <= 1e-15)
        recon = (s.psi.T * s.values) @ (s.phi * op.w1)
        assert np.max(np.abs(recon - op.matrix)) <= 1e-8
        assert_allclose((s.phi * op.w1) @ s.phi.T, np.eye(5), atol=1e-8)
        assert_allclose((s.psi * op.w2) @ s.psi.T, np.eye(5), atol=1e-8)
        for j in range(5):
            assert_allclose(op.apply(s.phi[j]), s.values[j] * s.psi[j], atol=1e-8)
            assert_allclose(op.adjoint(s.psi[j]), s.values[j] * s.phi[j], atol=1e-8)

    def test_csv(self):
        s = orc.svd_system(orc.operator_from_pmf(np.eye(2) / 2))
        assert s.to_csv().splitlines()[0] == "j,lambda_j"


class TestTruth:
    def test_identity_regularity(self):
        s = orc.svd_system(orc.operator_from_pmf(np.eye(4) / 4))
        f = orc.make_beta_regular_truth(s, 1.5, 2.0, 0)
        assert_allclose(orc.regularity_sum(s, f, 1.5), 4.0, rtol=1e-12)

    def test_zero_norm(self):
        s = orc.svd_system(orc.operator_from_pmf(np.eye(3) / 3))
        assert_array_equal(orc.make_beta_regular_truth(s, 1.0, 0.0, 0), np.zeros(3))

    @pytest.mark.parametrize("beta", [0.5, 1.0, 2.0])
    def test_random_regularity(self, beta):
        d = discrete_iv_design(K1=12, K2=12, width=0.2)
        s = orc.svd_system(orc.estimate_operator(d))
        f = orc.make_beta_regular_truth(s, beta, 1.7, 3)
        assert_allclose(orc.regularity_sum(s, f, beta), 1.7**2, rtol=1e-10)

    def test_rejects_null_directions(self):
        s = orc.svd_system(orc.operator_from_pmf(np.full((3, 2), 1 / 6)))
        with pytest.raises(ConfigError):
            orc.make_beta_regular_truth(s, 1.0, 1.0, 0)
        with pytest.raises(ConfigError):
            orc.make_beta_regular_truth(s, 0.0, 1.0, 0, n_components=1)


class TestLoss:
    def test_exact_solution(self):
        op = orc.operator_from_pmf(np.eye(3) / 3)
        f = np.array([1.0, -2.0, 0.5])
        assert orc.primal_loss(op, f, op.apply(f), 0.0) == 0.0

    def test_zero_function(self):
        op = orc.operator_from_pmf(random_pmf(np.random.default_rng(7), 4, 3))
        b = np.array([1.0, 2.0, 3.0])
        assert_allclose(orc.primal_loss(op, np.zeros(4), b, 0.7), 0.5 * orc.wnorm2(b, op.w2), rtol=1e-15)

    def test_suboptimality(self):
        rng = np.random.default_rng(8)
        op = orc.operator_from_pmf(random_pmf(rng, 6, 6))
        b = op.apply(rng.normal(size=6))
        alpha = 0.2
        fa = orc.tikhonov_solve(op, b, alpha)
        assert abs(orc.suboptimality(op, fa, b, alpha)) <= 1e-12
        for _ in range(10):
            f = rng.normal(size=6)
            gap = orc.suboptimality(op, f, b, alpha)
            assert gap >= 0.5 * alpha * orc.wnorm2(f - fa, op.w1) - 1e-10
        L_star = orc.primal_loss(op, fa, b, alpha)
        assert_allclose(orc.suboptimality(op, np.zeros(6), b, alpha), 0.5 * orc.wnorm2(b, op.w2) - L_star)

    def test_inner_max_identity(self):
        rng = np.random.default_rng(9)
        op = orc.operator_from_pmf(random_pmf(rng, 5, 4))
        b, f = rng.normal(size=4), rng.normal(size=5)
        u = orc.best_response(f, op, b)
        assert_allclose(orc.grid_payoff(op, f, u, b, 0.3), orc.primal_loss(op, f, b, 0.3), rtol=1e-12)
        # perturbing u away from the best response lowers the payoff
        for _ in range(5):
            assert orc.grid_payoff(op, f, u + rng.normal(size=4), b, 0.3) < orc.grid_payoff(op, f, u, b, 0.3)

    def test_best_response_cases(self):
        op = orc.operator_from_pmf(np.eye(3) / 3)
        f = np.array([1.0, 2.0, 3.0])
        assert_array_equal(orc.best_response(f, op, np.zeros(3)), f)
        assert_array_equal(orc.best_response(f, op, op.apply(f)), np.zeros(3))
        with pytest.raises(DimensionError):
            orc.best_response(f, op, np.zeros(2))

    def test_saddle_stationarity(self):
        rng = np.random.default_rng(10)
        op = orc.operator_from_pmf(random_pmf(rng, 6, 5))
        b = rng.normal(size=5)
        fa = orc.tikhonov_solve(op, b, 0.1)
        gf, gu = orc.grid_payoff_gradients(op, fa, orc.best_response(fa, op, b), b, 0.1)
        assert np.max(np.abs(gf)) <= 1e-8 and np.max(np.abs(gu)) <= 1e-8
