import itertools

import numpy as np
import pytest

from queryrec import autograd as ag
from queryrec.autograd import Tape, backprop
from queryrec.data import Vocabulary
from queryrec.din import (
    adaptive_pool,
    auc,
    auc_pairwise,
    bce_loss,
    bce_value,
    embed_features,
    init_embeddings,
    init_head,
    predict_ctr,
)
from queryrec.optim import ParameterStore
from queryrec.rng import Rng

D = 4


def make_store():
    store = ParameterStore()
    vocab = Vocabulary(n_users=3, n_items=5, n_queries=2, user_field_cards=(2,), item_field_cards=(3,))
    init_embeddings(store, vocab, D, Rng(0))
    return store


def test_lookup_returns_basis_row():
    store = make_store()
    table = store["emb.item"]
    table[2] = np.eye(D)[1]
    tape = Tape()
    P = {n: tape.constant(v) for n, v in store.items()}
    _, e_i, _, _ = embed_features(P, np.array([0]), np.array([2]), np.array([[0]]), np.array([[1]]))
    np.testing.assert_array_equal(e_i.data[0], np.eye(D)[1])


def test_same_ids_same_embeddings():
    tape = Tape()
    P = {n: tape.constant(v) for n, v in make_store().items()}
    parts = embed_features(P, np.array([1, 1]), np.array([4, 4]), np.array([[1], [1]]), np.array([[2], [2]]))
    for part in parts:
        np.testing.assert_array_equal(part.data[0], part.data[1])


def test_out_of_range_id():
    tape = Tape()
    P = {n: tape.constant(v) for n, v in make_store().items()}
    with pytest.raises(IndexError):
        embed_features(P, np.array([9]), np.array([0]), np.array([[0]]), np.array([[0]]))


def test_gradient_reaches_only_looked_up_rows():
    store = make_store()
    tape = Tape()
    P = store.bind(tape)
    e_u, e_i, _, _ = embed_features(P, np.array([0, 2]), np.array([1, 1]), np.array([[0], [1]]), np.array([[0], [0]]))
    grads = backprop(tape, ag.sum_(ag.tanh(e_u * e_i)))
    g = grads[P["emb.item"].node]
    assert np.any(g[1] != 0)
    np.testing.assert_array_equal(g[[0, 2, 3, 4]], 0.0)
    assert np.all(grads[P["emb.user"].node][1] == 0)


def pool(history, target, weights=None, mask=None):
    tape = Tape()
    h = tape.constant(np.asarray(history, dtype=float))
    t = tape.constant(np.asarray(target, dtype=float))
    w = None if weights is None else tape.constant(np.asarray(weights, dtype=float))
    return adaptive_pool({}, "x", h, t, mask, w).data


def test_pool_single_item_with_unit_weight():
    e = np.array([[[1.0, 2.0, 3.0, 4.0]]])
    np.testing.assert_array_equal(pool(e, np.ones((1, D)), weights=[[1.0]]), e[:, 0])


def test_pool_empty_history_is_zero():
    np.testing.assert_array_equal(pool(np.zeros((2, 0, D)), np.ones((2, D))), np.zeros((2, D)))


def test_pool_weights_are_not_normalised():
    e = np.array([0.5, -1.0, 2.0, 0.0])
    out = pool(np.stack([e, e])[None], np.ones((1, D)), weights=[[0.3, 0.3]])
    np.testing.assert_allclose(out[0], 2 * 0.3 * e)


def test_pool_is_linear_in_history_for_fixed_weights(rng64):
    h1, h2 = rng64.normal(size=(2, 3, D)), rng64.normal(size=(2, 3, D))
    w = rng64.normal(size=(2, 3))
    tgt = np.zeros((2, D))
    np.testing.assert_allclose(pool(2 * h1 + h2, tgt, w), 2 * pool(h1, tgt, w) + pool(h2, tgt, w), atol=1e-12)


def test_pool_with_learned_scorer_respects_mask(rng64):
    from queryrec.din import init_scorer

    store = ParameterStore()
    init_scorer(store, "att", D, 3, Rng(1))
    tape = Tape()
    P = {n: tape.constant(v) for n, v in store.items()}
    h = rng64.normal(size=(1, 3, D))
    t = tape.constant(rng64.normal(size=(1, D)))
    full = adaptive_pool(P, "att", tape.constant(h[:, :2]), t).data
    masked = adaptive_pool(P, "att", tape.constant(h), t, np.array([[1, 1, 0]])).data
    np.testing.assert_allclose(full, masked, atol=1e-12)


def head_store(in_dim, zero=False):
    store = ParameterStore()
    init_head(store, in_dim, (6, 5), Rng(2))
    if zero:
        for name in store.names():
            store[name] = np.zeros_like(store[name])
    return store


def test_zero_head_predicts_half():
    store = head_store(8, zero=True)
    tape = Tape()
    P = {n: tape.constant(v) for n, v in store.items()}
    prob = predict_ctr(P, (tape.constant(np.ones((3, 4))), tape.constant(np.ones((3, 4)))), 3)
    np.testing.assert_array_equal(prob.data, 0.5)


def test_prediction_inside_unit_interval_and_order_matters(rng64):
    store = head_store(8)
    tape = Tape()
    P = {n: tape.constant(v) for n, v in store.items()}
    a, b = tape.constant(rng64.normal(size=(20, 4))), tape.constant(rng64.normal(size=(20, 4)))
    p1 = predict_ctr(P, (a, b), 3).data
    p2 = predict_ctr(P, (b, a), 3).data
    assert np.all((p1 > 0) & (p1 < 1))
    assert not np.allclose(p1, p2)


@pytest.mark.parametrize("p,y,expected", [(0.5, 1, np.log(2)), (0.9, 0, -np.log(0.1))])
def test_bce_values(p, y, expected):
    tape = Tape()
    assert abs(float(bce_loss(tape.constant(np.array([p])), [y]).data) - expected) < 1e-12
    assert abs(bce_value(p, y) - expected) < 1e-12


def test_bce_vanishes_at_perfect_prediction():
    assert bce_value(1.0 - 1e-12, 1) < 1e-11
    assert bce_value(0.3, 1) > 0


def test_bce_rejects_probabilities_outside_unit_interval():
    tape = Tape()
    with pytest.raises(ValueError):
        bce_loss(tape.constant(np.array([1.5])), [1])


@pytest.mark.parametrize(
    "scores,labels,expected", [([0.9, 0.1], [1, 0], 1.0), ([0.1, 0.9], [1, 0], 0.0), ([0.5, 0.5], [1, 0], 0.5)]
)
def test_auc_examples(scores, labels, expected):
    assert auc(scores, labels) == expected


def test_auc_single_class_raises():
    with pytest.raises(ValueError):
        auc([0.1, 0.2], [1, 1])


def test_auc_matches_pairwise_with_ties(rng64):
    for _ in range(200):
        n = int(rng64.integers(2, 60))
        scores = rng64.integers(0, 5, n) / 4.0
        labels = rng64.integers(0, 2, n)
        if labels.min() == labels.max():
            continue
        assert auc(scores, labels) == auc_pairwise(scores, labels)
