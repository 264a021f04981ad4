import cvxpy as cp
import numpy as np
import pytest

from oracles import (bipartite_breakpoints, knapsack_sort_scan, ml_entropy_cvx,
                     topk_entropy_dual_cvx, topk_entropy_primal_cvx,
                     topk_enumeration)
from topksdca.lambert import lambert_v
from topksdca.prox import (KnapsackProblem, in_bipartite, knapsack,
                           project_bipartite, project_topk_alpha,
                           project_topk_beta, prox_ml_entropy,
                           prox_topk_entropy_dual, solve_knapsack,
                           solve_topk_entropy_primal)


def in_alpha(x, k, r, tol=1e-10):
    s = x.sum()
    return bool(np.all(x >= -tol) and np.all(x <= s / k + tol) and s <= r + tol)


def in_beta(x, k, r, tol=1e-10):
    return bool(np.all(x >= -tol) and np.all(x <= r / k + tol) and x.sum() <= r + tol)


def biased_obj(x, b, rho):
    return np.sum((x - b) ** 2) + rho * x.sum() ** 2


class TestKnapsack:
    def test_uniform_shift(self):
        x = solve_knapsack(KnapsackProblem(np.array([0.2, 0.3]), 1.0))
        np.testing.assert_allclose(x, [0.45, 0.55], atol=1e-15)

    def test_interior_point_of_inequality_budget(self):
        b = np.array([0.1, 0.2, 0.05])
        x = solve_knapsack(KnapsackProblem(b, 1.0, equality=False))
        np.testing.assert_array_equal(x, b)

    def test_matches_sort_and_scan(self, rng):
        worst = 0.0
        for _ in range(1000):
            b = rng.normal(size=8) * rng.choice([0.1, 1, 10])
            lo = rng.uniform(-1, 0, 8) * rng.integers(0, 2)
            hi = lo + rng.uniform(0.05, 2, 8)
            r = rng.uniform(lo.sum(), hi.sum())
            x, t = knapsack(b, r, lo, hi)
            ref = knapsack_sort_scan(b, r, lo, hi)
            worst = max(worst, np.abs(x - ref).max())
            np.testing.assert_allclose(x, np.clip(b - t, lo, hi), atol=1e-12)
        assert worst <= 1e-10

    def test_kkt_residual(self, rng):
        b = rng.normal(size=20)
        x, t = knapsack(b, 3.0, 0.0, 0.5)
        assert abs(x.sum() - 3.0) <= 1e-10
        free = (x > 0) & (x < 0.5)
        np.testing.assert_allclose(b[free] - x[free], t, atol=1e-10)

    def test_infeasible_budget(self):
        with pytest.raises(ValueError, match="infeasible"):
            knapsack(np.zeros(3), 5.0, 0.0, 1.0)

    def test_negative_budget(self):
        with pytest.raises(ValueError):
            solve_knapsack(KnapsackProblem(np.zeros(3), -1.0, equality=False))


class TestTopkProjections:
    @pytest.mark.parametrize("variant", ["alpha", "beta"])
    @pytest.mark.parametrize("rho", [0.0, 0.5])
    def test_matches_enumeration(self, rng, variant, rho):
        proj = project_topk_alpha if variant == "alpha" else project_topk_beta
        worst = 0.0
        for trial in range(250):
            m = int(rng.integers(3, 7))
            k = int(rng.integers(2, 4))
            b = rng.normal(size=m) * rng.choice([0.3, 1, 3])
            if trial % 5 == 0:  # exercise ties
                b = np.round(2 * b) / 2
            r = rng.choice([0.5, 1.0, 2.0])
            x = proj(b, k, r, rho)
            ref = topk_enumeration(b, k, r, rho, variant)
            worst = max(worst, np.abs(x - ref).max())
        assert worst <= 1e-8

    def test_k1_is_simplex_projection(self, rng):
        for _ in range(100):
            b = rng.normal(size=7)
            ref = solve_knapsack(KnapsackProblem(b, 1.0, equality=False))
            np.testing.assert_allclose(project_topk_alpha(b, 1), ref, atol=1e-12)
            np.testing.assert_allclose(project_topk_beta(b, 1), ref, atol=1e-12)

    @pytest.mark.parametrize("proj", [project_topk_alpha, project_topk_beta])
    def test_nonpositive_input_gives_zero(self, proj, rng):
        b = -np.abs(rng.normal(size=6))
        np.testing.assert_array_equal(proj(b, 2, 1.0), np.zeros(6))

    def test_beta_saturation(self):
        x = project_topk_beta(np.full(5, 3.0), 5, 2.0)
        np.testing.assert_allclose(x, np.full(5, 0.4))
        assert x.sum() == pytest.approx(2.0)

    def test_feasible_idempotent_nonexpansive(self, rng):
        for _ in range(200):
            m, k = 8, int(rng.integers(1, 5))
            b1, b2 = rng.normal(size=(2, m)) * 2
            for proj, member in ((project_topk_alpha, in_alpha),
                                 (project_topk_beta, in_beta)):
                p1, p2 = proj(b1, k, 1.5), proj(b2, k, 1.5)
                assert member(p1, k, 1.5)
                np.testing.assert_allclose(proj(p1, k, 1.5), p1, atol=1e-10)
                assert np.linalg.norm(p1 - p2) <= np.linalg.norm(b1 - b2) + 1e-12

    def test_set_nesting(self, rng):
        for _ in range(200):
            b = rng.normal(size=6) * 2
            k = int(rng.integers(2, 4))
            da = biased_obj(project_topk_alpha(b, k), b, 0)
            db = biased_obj(project_topk_beta(b, k), b, 0)
            ds = biased_obj(project_topk_alpha(b, 1), b, 0)
            assert da >= db - 1e-12 and db >= ds - 1e-12

    def test_fewer_coordinates_than_k(self):
        np.testing.assert_array_equal(project_topk_alpha(np.ones(2), 3), np.zeros(2))


def qp_bipartite(b, b_bar, r):
    x, y = cp.Variable(b.size), cp.Variable(b_bar.size)
    prob = cp.Problem(cp.Minimize(cp.sum_squares(x - b) + cp.sum_squares(y - b_bar)),
                      [x >= 0, y >= 0, cp.sum(x) == cp.sum(y), cp.sum(x) <= r])
    prob.solve(solver=cp.CLARABEL, tol_gap_abs=1e-12, tol_gap_rel=1e-12, tol_feas=1e-12)
    return x.value, y.value


class TestBipartite:
    def test_feasible_point_unchanged(self):
        b, bb = np.array([0.2, 0.1, 0.0]), np.array([0.15, 0.15])
        p, pb = project_bipartite(b, bb, 1.0)
        np.testing.assert_allclose(p, b, atol=1e-15)
        np.testing.assert_allclose(pb, bb, atol=1e-15)

    def test_zero_radius(self, rng):
        p, pb = project_bipartite(rng.normal(size=4), rng.normal(size=3), 0.0)
        assert not p.any() and not pb.any()

    def test_negative_radius(self):
        with pytest.raises(ValueError):
            project_bipartite(np.ones(2), np.ones(2), -1.0)

    @pytest.mark.parametrize("m", [4, 50, 500])
    def test_matches_breakpoint_oracle(self, rng, m):
        trials = {4: 1000, 50: 100, 500: 10}[m]
        worst = 0.0
        for _ in range(trials):
            b, bb = rng.normal(size=(2, m)) * rng.choice([0.1, 1, 5])
            bb += rng.normal()  # unbalance the blocks
            r = rng.choice([0.5, 1.0, 5.0])
            p, pb = project_bipartite(b, bb, r)
            q, qb = bipartite_breakpoints(b, bb, r)
            assert in_bipartite(p, pb, r)
            worst = max(worst, np.abs(p - q).max(), np.abs(pb - qb).max())
        assert worst <= 1e-10

    def test_matches_generic_qp(self, rng):
        for _ in range(30):
            b, bb = rng.normal(size=(2, 4))
            p, pb = project_bipartite(b, bb, 1.0)
            q, qb = qp_bipartite(b, bb, 1.0)
            np.testing.assert_allclose(p, q, atol=1e-7)
            np.testing.assert_allclose(pb, qb, atol=1e-7)


def entropy_dual_objective(x, b, alpha):
    s = x.sum()
    xlogx = np.sum(x[x > 0] * np.log(x[x > 0]))
    return 0.5 * alpha * (x @ x + s * s) - b @ x + xlogx + (1 - s) * np.log(1 - s)


class TestTopkEntropyDual:
    def test_softmax_structure(self, rng):
        b = rng.normal(size=6)
        res = prox_topk_entropy_dual(b, 2.0, 1)
        assert np.all(res.x > 0) and res.x.sum() < 1
        assert res.n_upper == 0
        # defining equation: V(alpha - t) + sum V(b - t) = alpha
        lhs = lambert_v(2.0 - res.t) + lambert_v(b - res.t).sum()
        assert abs(lhs - 2.0) <= 1e-10
        np.testing.assert_allclose(2.0 * res.x, lambert_v(b - res.t), rtol=1e-12)

    def test_symmetric_input(self):
        res = prox_topk_entropy_dual(np.full(5, 0.7), 1.3, 2)
        np.testing.assert_allclose(res.x, res.x[0], rtol=1e-13)

    def test_matches_conic_solver(self, rng):
        worst_obj, worst_res = 0.0, 0.0
        for _ in range(250):
            m = int(rng.integers(3, 11))
            k = int(rng.integers(1, 4))
            alpha = 10 ** rng.uniform(-2, 2)
            b = rng.normal(size=m) * rng.choice([0.5, 2, 5])
            res = prox_topk_entropy_dual(b, alpha, k)
            assert np.all(res.x > 0)
            assert in_alpha(res.x, k, 1.0, tol=1e-12)
            _, ref_obj = topk_entropy_dual_cvx(b, alpha, k)
            ours = entropy_dual_objective(res.x, b, alpha)
            worst_obj = max(worst_obj, ours - ref_obj)
            worst_res = max(worst_res, res.residual)
            # free coordinates follow x_j = V(b_j - t) / alpha
            free = res.x < res.s / k * (1 - 1e-9)
            if np.isfinite(res.t) and free.any():
                np.testing.assert_allclose(alpha * res.x[free],
                                           lambert_v(b[free] - res.t), rtol=1e-8)
        assert worst_res <= 1e-8
        assert worst_obj <= 1e-6


class TestTopkEntropyPrimal:
    def test_softmax_reduction(self, rng):
        a = rng.normal(size=5)
        res = solve_topk_entropy_primal(a, 1)
        assert res.loss == pytest.approx(np.log1p(np.exp(a).sum()), rel=1e-13)
        assert res.upper.size == 0

    def test_uniform_scores(self):
        assert solve_topk_entropy_primal(np.zeros(9), 1).loss == pytest.approx(np.log(10))

    def test_matches_conic_solver(self, rng):
        for _ in range(60):
            a = rng.normal(size=6) * rng.choice([0.5, 2, 4])
            k = int(rng.integers(2, 4))
            ours = solve_topk_entropy_primal(a, k).loss
            assert abs(ours - topk_entropy_primal_cvx(a, k)) <= 1e-6

    def test_partition_consistency(self, rng):
        a = np.array([5.0, 4.0, -1.0, -2.0, 0.0])
        res = solve_topk_entropy_primal(a, 3)
        assert np.all(np.abs(res.x[res.upper] - res.s / 3) <= 1e-15)
        assert np.all(res.x[res.middle] <= res.s / 3 + 1e-12)
        assert res.x.sum() == pytest.approx(res.s)


class TestMultilabelEntropy:
    def test_normalization_and_equation(self, rng):
        for _ in range(250):
            b, bb = rng.normal(size=int(rng.integers(1, 5))), rng.normal(size=int(rng.integers(1, 6)))
            alpha = 10 ** rng.uniform(-2, 1)
            p, pb, t = prox_ml_entropy(b, bb, alpha)
            assert np.all(p > 0) and np.all(pb > 0)
            assert abs(p.sum() + pb.sum() - 1) <= 1e-8
            np.testing.assert_allclose(alpha * p, lambert_v(alpha * b - t), rtol=1e-12)

    def test_symmetric_blocks(self, rng):
        b = rng.normal(size=3)
        p, pb, _ = prox_ml_entropy(b, b.copy(), 0.8)
        np.testing.assert_allclose(p, pb, rtol=1e-14)

    def test_matches_conic_solver(self, rng):
        for _ in range(60):
            b, bb = rng.normal(size=3), rng.normal(size=4)
            alpha = 10 ** rng.uniform(-1, 1)
            p, pb, _ = prox_ml_entropy(b, bb, alpha)
            _, _, ref = ml_entropy_cvx(b, bb, alpha)
            ours = (alpha / 2 * (np.sum((p - b) ** 2) + np.sum((pb - bb) ** 2))
                    + np.sum(p * np.log(p)) + np.sum(pb * np.log(pb)))
            assert abs(ours - ref) <= 1e-6

    def test_rejects_nonpositive_alpha(self):
        with pytest.raises(ValueError):
            prox_ml_entropy(np.ones(2), np.ones(2), 0.0)
