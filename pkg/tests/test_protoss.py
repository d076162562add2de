import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from orderlab.errors import ContractError
from orderlab.protoss import (PrototypeSet, predict, prototypes, query_nll, refine_backward,
                              refine_forward, refine_prototypes, soft_assign)
from orderlab.tensorcore import check_array_grads


def pset(rows):
    rows = np.asarray(rows, dtype=float)
    return PrototypeSet(rows, np.arange(len(rows)))


def test_single_shot_prototype_is_the_embedding(rng):
    s = rng.standard_normal((4, 3))
    np.testing.assert_array_equal(prototypes(s, np.arange(4)).protos, s)


def test_prototype_mean():
    p = prototypes(np.array([[0.0, 0.0], [2.0, 0.0]]), np.array([0, 0]))
    np.testing.assert_array_equal(p.protos, [[1.0, 0.0]])


def test_prototypes_match_loop(rng):
    s = rng.standard_normal((25, 4))
    y = np.repeat(np.arange(5), 5)
    rng.shuffle(y)
    expected = np.array([s[y == c].mean(0) for c in range(5)])
    np.testing.assert_allclose(prototypes(s, y).protos, expected, rtol=1e-12)


def test_empty_class_is_contract_error():
    with pytest.raises(ContractError):
        prototypes(np.zeros((2, 2)), np.array([0, 2]))


def test_equidistant_point_splits_evenly():
    mu = soft_assign(np.array([[0.0, 1.0]]), pset([[1.0, 1.0], [-1.0, 1.0]]))
    np.testing.assert_allclose(mu, [[0.5, 0.5]])


def test_point_at_prototype_dominates():
    mu = soft_assign(np.array([[0.0, 0.0]]), pset([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]))
    assert mu[0, 0] > 0.99


def test_single_class_assignment_is_one(rng):
    mu = soft_assign(rng.standard_normal((5, 3)), pset(rng.standard_normal((1, 3))))
    np.testing.assert_array_equal(mu, np.ones((5, 1)))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), scale=st.floats(0.01, 100.0), distractor=st.booleans())
def test_soft_assign_rows_sum_to_one(seed, scale, distractor):
    rng = np.random.default_rng(seed)
    mu = soft_assign(scale * rng.standard_normal((7, 3)), pset(scale * rng.standard_normal((4, 3))),
                     distractor)
    assert np.all(mu >= 0)
    np.testing.assert_allclose(mu.sum(1), 1.0, atol=1e-9)


def test_refine_with_empty_unlabeled_keeps_prototypes(rng):
    s = rng.standard_normal((6, 2))
    y = np.array([0, 0, 1, 1, 2, 2])
    out = refine_prototypes(s, y, np.zeros((0, 2)), np.zeros((0, 3)))
    np.testing.assert_allclose(out.protos, prototypes(s, y).protos)


def test_refine_direct_formula():
    out = refine_prototypes(np.array([[1.0, 0.0]]), np.array([0]), np.array([[3.0, 0.0]]),
                            np.array([[1.0]]))
    np.testing.assert_allclose(out.protos, [[2.0, 0.0]])


def test_refine_matches_weighted_mean_loop(rng):
    s = rng.standard_normal((6, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    u = rng.standard_normal((5, 3))
    mu = soft_assign(u, prototypes(s, y))
    out = refine_prototypes(s, y, u, mu)
    for c in range(3):
        num = s[y == c].sum(0) + sum(mu[i, c] * u[i] for i in range(5))
        np.testing.assert_allclose(out.protos[c], num / ((y == c).sum() + mu[:, c].sum()))


def test_zero_mass_class_is_unchanged(rng):
    s = rng.standard_normal((4, 2))
    y = np.array([0, 1, 2, 3])
    u = rng.standard_normal((3, 2))
    mu = np.zeros((3, 4))
    mu[:, 0] = 1.0
    out = refine_prototypes(s, y, u, mu)
    np.testing.assert_array_equal(out.protos[1:], s[1:])


def test_query_at_prototype_has_tiny_loss():
    protos = pset([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    loss, _, _ = query_nll(np.array([[0.0, 0.0]]), np.array([0]), protos)
    assert loss < 1e-3


def test_coincident_prototypes_give_log_n(rng):
    loss, _, _ = query_nll(rng.standard_normal((4, 2)), np.array([0, 1, 2, 3]), pset(np.ones((4, 2))))
    assert loss == pytest.approx(np.log(4), abs=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_query_nll_gradients(seed):
    rng = np.random.default_rng(seed)
    q, p = rng.standard_normal((8, 3)), rng.standard_normal((4, 3))
    y = rng.integers(4, size=8)

    def f():
        loss, gq, gp = query_nll(q, y, pset(p))
        return loss, [gq, gp]

    assert check_array_grads(f, [q, p]) < 1e-4


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), distractor=st.booleans())
def test_refine_chain_gradients(seed, distractor):
    rng = np.random.default_rng(seed)
    s, u, q = rng.standard_normal((6, 3)), rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
    y, qy = np.array([0, 1, 2, 0, 1, 2]), rng.integers(3, size=4)

    def f():
        refined, cache = refine_forward(s, y, u, 3, distractor)
        loss, gq, gp = query_nll(q, qy, refined)
        gs, gu = refine_backward(cache, gp)
        return loss, [gs, gu, gq]

    assert check_array_grads(f, [s, u, q]) < 1e-4


def test_refine_forward_matches_composition(rng):
    s, u = rng.standard_normal((6, 3)), rng.standard_normal((5, 3))
    y = np.array([0, 1, 2, 0, 1, 2])
    refined, _ = refine_forward(s, y, u, 3)
    expected = refine_prototypes(s, y, u, soft_assign(u, prototypes(s, y)))
    np.testing.assert_allclose(refined.protos, expected.protos, rtol=1e-12)


def test_predict_at_prototype_and_tie_break():
    protos = pset([[-1.0, 0.0], [1.0, 0.0], [0.0, 5.0]])
    pred, acc = predict(np.array([[1.0, 0.0], [0.0, 0.0]]), protos, np.array([1, 0]))
    assert list(pred) == [1, 0] and acc == 1.0


def test_predict_separable_episode(rng):
    means = 10.0 * np.eye(5)
    protos = pset(means)
    q = np.repeat(means, 3, axis=0)
    _, acc = predict(q, protos, np.repeat(np.arange(5), 3))
    assert acc == 1.0


def test_class_relabeling_leaves_loss_unchanged(rng):
    q, p = rng.standard_normal((6, 2)), rng.standard_normal((3, 2))
    y = rng.integers(3, size=6)
    perm = rng.permutation(3)
    inv = np.argsort(perm)
    a = query_nll(q, y, pset(p))[0]
    b = query_nll(q, inv[y], pset(p[perm]))[0]
    assert a == pytest.approx(b, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_translation_invariance(seed):
    rng = np.random.default_rng(seed)
    s, u, q = rng.standard_normal((6, 3)), rng.standard_normal((5, 3)), rng.standard_normal((4, 3))
    y, qy = np.array([0, 1, 2, 0, 1, 2]), rng.integers(3, size=4)
    shift = 5.0 * rng.standard_normal(3)
    r1, _ = refine_forward(s, y, u, 3)
    r2, _ = refine_forward(s + shift, y, u + shift, 3)
    assert query_nll(q, qy, r1)[0] == pytest.approx(query_nll(q + shift, qy, r2)[0], abs=1e-9)
    assert np.array_equal(predict(q, r1)[0], predict(q + shift, r2)[0])
