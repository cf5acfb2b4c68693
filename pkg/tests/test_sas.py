import numpy as np
import pytest

from queryrec.autograd import ShapeError, Tape, backprop
from queryrec.optim import ParameterStore
from queryrec.rng import Rng
from queryrec.sas import init_sas, nip_loss, sas_encode, sas_sequence

D, L_MAX = 4, 6


@pytest.fixture
def params():
    store = ParameterStore()
    init_sas(store, D, L_MAX, Rng(5))
    tape = Tape()
    return tape, {n: tape.constant(v) for n, v in store.items()}


@pytest.mark.parametrize("length", range(1, L_MAX + 1))
def test_output_shape(params, rng64, length):
    tape, P = params
    out = sas_encode(P, tape.constant(rng64.normal(size=(3, length, D))), [length] * 3)
    assert out.shape == (3, D)


def test_empty_history_is_sentinel(params):
    tape, P = params
    out = sas_encode(P, tape.constant(np.zeros((2, 0, D))), [0, 0])
    np.testing.assert_array_equal(out.data, np.tile(P["sas.sentinel"].data, (2, 1)))
    mixed = sas_encode(P, tape.constant(np.ones((2, 3, D))), [0, 3])
    np.testing.assert_array_equal(mixed.data[0], P["sas.sentinel"].data)


def test_too_long_sequence_is_rejected(params):
    tape, P = params
    with pytest.raises(ShapeError):
        sas_encode(P, tape.constant(np.zeros((1, L_MAX + 1, D))), [L_MAX + 1])


def test_appending_a_query_leaves_earlier_positions_unchanged(params, rng64):
    tape, P = params
    seq = rng64.normal(size=(2, 5, D))
    short = sas_sequence(P, tape.constant(seq[:, :4]), [4, 4]).data
    full = sas_sequence(P, tape.constant(seq), [5, 5]).data
    np.testing.assert_allclose(full[:, :4], short, atol=1e-12)


def test_without_causal_mask_earlier_positions_change(params, rng64):
    tape, P = params
    seq = rng64.normal(size=(2, 5, D))
    short = sas_sequence(P, tape.constant(seq[:, :4]), [4, 4], causal=False).data
    full = sas_sequence(P, tape.constant(seq), [5, 5], causal=False).data
    assert np.abs(full[:, :4] - short).max() > 1e-6


def test_padding_does_not_leak(params, rng64):
    tape, P = params
    seq = rng64.normal(size=(1, 5, D))
    noisy = seq.copy()
    noisy[:, 3:] = rng64.normal(size=(1, 2, D))
    a = sas_encode(P, tape.constant(seq), [3]).data
    b = sas_encode(P, tape.constant(noisy), [3]).data
    np.testing.assert_allclose(a, b, atol=1e-12)


def nip(e_q, pos, neg, pos_mask=None, neg_mask=None):
    tape = Tape()
    pos_mask = np.ones(pos.shape[:2]) if pos_mask is None else pos_mask
    neg_mask = np.ones(neg.shape[:2]) if neg_mask is None else neg_mask
    q = tape.variable(np.asarray(e_q, dtype=float))
    loss = nip_loss(q, tape.constant(pos), pos_mask, tape.constant(neg), neg_mask)
    return tape, q, loss


def test_zero_dots_give_two_ln_two(rng64):
    _, _, loss = nip(np.zeros((3, D)), rng64.normal(size=(3, 4, D)), rng64.normal(size=(3, 4, D)))
    assert abs(float(loss.data) - 2 * np.log(2)) < 1e-9


def test_perfect_separation_drives_loss_to_zero():
    v = np.eye(D)[:1]
    pos, neg = np.tile(v, (1, 2, 1)), np.tile(-v, (1, 3, 1))
    values = [float(nip(s * v, pos, neg)[2].data) for s in (1.0, 5.0, 20.0, 40.0)]
    assert all(a > b for a, b in zip(values, values[1:]))
    assert values[-1] < 1e-12
    assert all(x >= 0 for x in values)


def test_loss_is_invariant_to_list_order(rng64):
    q, pos, neg = rng64.normal(size=(2, D)), rng64.normal(size=(2, 4, D)), rng64.normal(size=(2, 3, D))
    base = float(nip(q, pos, neg)[2].data)
    shuffled = float(nip(q, pos[:, [2, 0, 3, 1]], neg[:, [1, 2, 0]])[2].data)
    assert abs(base - shuffled) < 1e-12


def test_empty_lists_contribute_zero(rng64):
    q = rng64.normal(size=(2, D))
    pos = rng64.normal(size=(2, 2, D))
    only_pos = float(nip(q, pos, np.zeros((2, 0, D)))[2].data)
    masked = float(nip(q, pos, rng64.normal(size=(2, 3, D)), neg_mask=np.zeros((2, 3)))[2].data)
    assert abs(only_pos - masked) < 1e-12
    assert float(nip(q, np.zeros((2, 0, D)), np.zeros((2, 0, D)))[2].data) == 0.0


def test_gradient_points_toward_positives(rng64):
    pos = rng64.normal(size=(1, 3, D))
    neg = -pos[:, :2] + 0.1 * rng64.normal(size=(1, 2, D))
    tape, q, loss = nip(np.zeros((1, D)), pos, neg)
    grad = backprop(tape, loss)[q.node][0]
    direction = pos[0].sum(axis=0)
    assert grad @ direction < 0
    h = 1e-6
    fd = (
        float(nip(h * direction[None], pos, neg)[2].data) - float(nip(-h * direction[None], pos, neg)[2].data)
    ) / (2 * h)
    assert fd < 0 and abs(fd - grad @ direction) < 1e-6 * max(1.0, abs(fd))
