import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linprog

from orderlab.diagnostics import brute_force_ot
from orderlab.errors import ContractError, DimensionError
from orderlab.otreg import (DiscreteDist, cost_matrix, ot_exact, ot_exact_weights, ot_loss,
                            ot_sinkhorn, uniform_plan)
from orderlab.taskstream import FeatureSnapshot
from orderlab.tensorcore import check_array_grads


def random_dist(rng, n, d=2):
    return DiscreteDist(rng.standard_normal((n, d)), rng.dirichlet(np.ones(n)))


def lp_cost(a, b, C):
    n, m = C.shape
    A = np.zeros((n + m, n * m))
    for i in range(n):
        A[i, i * m:(i + 1) * m] = 1.0
    for j in range(m):
        A[n + j, j::m] = 1.0
    return linprog(C.ravel(), A_eq=A, b_eq=np.concatenate([a, b]), method="highs").fun


def ipf_random_plan(rng, a, b, iters=200):
    W = rng.random((len(a), len(b))) + 1e-3
    for _ in range(iters):
        W *= (a / W.sum(1))[:, None]
        W *= (b / W.sum(0))[None, :]
    return W


def test_cost_matrix_examples(rng):
    assert cost_matrix(np.array([[1.0, 2.0]]), np.array([[1.0, 2.0]])).tolist() == [[0.0]]
    assert cost_matrix(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]))[0, 0] == pytest.approx(25.0)
    E, G = rng.standard_normal((4, 3)), rng.standard_normal((6, 3))
    loop = np.array([[sum((E[i, k] - G[j, k]) ** 2 for k in range(3)) for j in range(6)]
                     for i in range(4)])
    np.testing.assert_allclose(cost_matrix(E, G), loop, rtol=1e-12, atol=1e-12)
    with pytest.raises(DimensionError):
        cost_matrix(E, G[:, :2])


def test_identical_sets_cost_zero(rng):
    pts = rng.standard_normal((4, 3))
    plan = ot_exact(DiscreteDist.uniform(pts), DiscreteDist.uniform(pts))
    assert plan.cost == pytest.approx(0.0, abs=1e-12)
    np.testing.assert_allclose(plan.W, np.eye(4) / 4, atol=1e-12)


def test_one_by_one():
    plan = ot_exact(DiscreteDist(np.array([[0.0, 0.0]]), [1.0]),
                    DiscreteDist(np.array([[3.0, 4.0]]), [1.0]))
    assert plan.cost == pytest.approx(25.0) and plan.W.tolist() == [[1.0]]


def test_one_dimensional_sorted_matching():
    mu = DiscreteDist.uniform(np.array([[0.0], [2.0]]))
    nu = DiscreteDist.uniform(np.array([[1.0], [3.0]]))
    plan = ot_exact(mu, nu)
    assert plan.cost == pytest.approx(1.0)
    np.testing.assert_allclose(plan.W, [[0.5, 0.0], [0.0, 0.5]])


def test_rational_three_by_three_matches_vertex_enumeration(rng):
    for _ in range(20):
        a = rng.integers(1, 6, size=3).astype(float)
        b = rng.integers(1, 6, size=3).astype(float)
        a, b = a / a.sum(), b / b.sum()
        C = cost_matrix(rng.standard_normal((3, 2)), rng.standard_normal((3, 2)))
        plan = ot_exact_weights(a, b, C)
        assert plan.cost == pytest.approx(brute_force_ot(a, b, C), abs=1e-9)


def test_infeasible_weights_rejected():
    with pytest.raises(ContractError):
        ot_exact_weights(np.array([0.5, 0.5]), np.array([0.6, 0.6]), np.ones((2, 2)))
    with pytest.raises(ContractError):
        DiscreteDist(np.zeros((2, 1)), [0.7, 0.7])


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 4), m=st.integers(1, 4))
def test_small_instance_properties(seed, n, m):
    rng = np.random.default_rng(seed)
    mu, nu = random_dist(rng, n), random_dist(rng, m)
    plan = ot_exact(mu, nu)
    C = cost_matrix(mu.points, nu.points)
    assert np.all(plan.W >= 0)
    np.testing.assert_allclose(plan.row_marginals, mu.weights, atol=1e-7)
    np.testing.assert_allclose(plan.col_marginals, nu.weights, atol=1e-7)
    assert plan.cost == pytest.approx(float((plan.W * C).sum()), abs=1e-9)
    assert plan.cost == pytest.approx(brute_force_ot(mu.weights, nu.weights, C), abs=1e-9)
    assert plan.cost == pytest.approx(ot_exact(nu, mu).cost, abs=1e-9)
    # permuting points together with their weights
    p, q = rng.permutation(n), rng.permutation(m)
    moved = ot_exact(DiscreteDist(mu.points[p], mu.weights[p]), DiscreteDist(nu.points[q], nu.weights[q]))
    assert moved.cost == pytest.approx(plan.cost, abs=1e-9)


def test_optimal_against_random_feasible_plans(rng):
    for _ in range(10):
        n, m = rng.integers(1, 5, size=2)
        mu, nu = random_dist(rng, n), random_dist(rng, m)
        C = cost_matrix(mu.points, nu.points)
        best = ot_exact(mu, nu).cost
        for _ in range(100):
            W = ipf_random_plan(rng, mu.weights, nu.weights)
            assert best <= float((W * C).sum()) + 1e-9


def test_identity_of_indiscernibles(rng):
    pts = rng.standard_normal((3, 2))
    w = rng.dirichlet(np.ones(3))
    p = rng.permutation(3)
    assert ot_exact(DiscreteDist(pts, w), DiscreteDist(pts[p], w[p])).cost == pytest.approx(0.0, abs=1e-12)
    other = pts.copy()
    other[0] += 0.1
    assert ot_exact(DiscreteDist(pts, w), DiscreteDist(other, w)).cost > 0


def test_larger_instances_match_linear_programming(rng):
    for _ in range(10):
        n, m = rng.integers(5, 12, size=2)
        mu, nu = random_dist(rng, n, 3), random_dist(rng, m, 3)
        C = cost_matrix(mu.points, nu.points)
        assert ot_exact(mu, nu).cost == pytest.approx(lp_cost(mu.weights, nu.weights, C), abs=1e-9)


def test_assignment_fast_path_matches_simplex(rng):
    for _ in range(10):
        E, G = rng.standard_normal((7, 3)), rng.standard_normal((7, 3))
        fast = uniform_plan(E, G)
        exact = ot_exact(DiscreteDist.uniform(E), DiscreteDist.uniform(G))
        assert fast.cost == pytest.approx(exact.cost, abs=1e-12)


def test_sinkhorn_approaches_exact(rng):
    mu, nu = random_dist(rng, 4), random_dist(rng, 3)
    C = cost_matrix(mu.points, nu.points)
    exact = ot_exact(mu, nu).cost
    gaps = [abs(ot_sinkhorn(mu.weights, nu.weights, C, eps=e, n_iter=20_000).cost - exact)
            for e in (0.5, 0.05, 0.005)]
    assert gaps[2] < gaps[0] and gaps[2] < 5e-3


def test_ot_loss_identical_is_zero(rng):
    x = rng.standard_normal((5, 3))
    loss, g = ot_loss(x, FeatureSnapshot(x.copy(), 5, np.zeros(0, int)))
    assert loss == pytest.approx(0.0, abs=1e-12) and np.allclose(g, 0.0)


def test_ot_loss_single_drift(rng):
    g0 = rng.standard_normal((1, 3))
    v = np.array([[0.3, -1.0, 2.0]])
    loss, grad = ot_loss(g0 + v, g0)
    assert loss == pytest.approx(float((v * v).sum()))
    np.testing.assert_allclose(grad, 2 * v)


def test_ot_loss_rows_must_match(rng):
    with pytest.raises(ContractError):
        ot_loss(rng.standard_normal((3, 2)), rng.standard_normal((4, 2)))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_ot_loss_gradient(seed):
    rng = np.random.default_rng(seed)
    cur, snap = rng.standard_normal((5, 3)), rng.standard_normal((5, 3))

    def f():
        loss, g = ot_loss(cur, snap)
        return loss, [g]

    assert check_array_grads(f, [cur]) < 1e-3
