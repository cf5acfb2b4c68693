import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from queryrec import autograd as ag
from queryrec.autograd import NonFiniteError, ShapeError, Tape, backprop, finite_difference_gradient
from queryrec.gradcheck import check_gradients, primitive_cases

PRIMITIVE_NAMES = sorted(primitive_cases(0))


def grad_of(build, *values):
    tape = Tape()
    xs = [tape.variable(np.asarray(v, dtype=np.float64)) for v in values]
    out = build(*xs)
    grads = backprop(tape, out)
    return out, [grads.get(x.node, np.zeros_like(x.data)) for x in xs]


# -- forward examples ---------------------------------------------------------


def test_sigmoid_of_zero_is_half():
    tape = Tape()
    assert ag.sigmoid(tape.constant(np.array(0.0))).data == 0.5


def test_softmax_of_equal_entries_is_uniform():
    tape = Tape()
    np.testing.assert_array_equal(ag.softmax(tape.constant(np.zeros(2))).data, [0.5, 0.5])


def test_matmul_identity(rng64):
    A = rng64.normal(size=(3, 3))
    tape = Tape()
    np.testing.assert_array_equal((tape.constant(np.eye(3)) @ tape.constant(A)).data, A)


def test_softmax_rows_sum_to_one(rng64):
    tape = Tape()
    out = ag.softmax(tape.constant(rng64.normal(0, 10, (50, 7))), axis=-1).data
    assert np.max(np.abs(out.sum(axis=-1) - 1.0)) <= 1e-12


def test_sigmoid_and_tanh_ranges(rng64):
    tape = Tape()
    # float64 rounds tanh to +-1 beyond |x| ~ 19, so stay inside the representable range
    x = tape.constant(rng64.uniform(-18, 18, 1000))
    s, t = ag.sigmoid(x).data, ag.tanh(x).data
    assert np.all((s > 0) & (s < 1))
    assert np.all((t > -1) & (t < 1))


def test_sigmoid_is_stable_for_large_inputs():
    tape = Tape()
    out = ag.sigmoid(tape.constant(np.array([-800.0, 800.0]))).data
    assert np.all(np.isfinite(out))
    np.testing.assert_array_equal(out, [0.0, 1.0])


# -- backprop examples --------------------------------------------------------


def test_sigmoid_gradient_at_zero():
    _, (g,) = grad_of(lambda x: ag.sigmoid(x), np.array(0.0))
    assert g == 0.25


def test_dot_gradient_is_other_argument(rng64):
    a, b = rng64.normal(size=5), rng64.normal(size=5)
    _, (ga, gb) = grad_of(lambda x, y: ag.dot(x, y), a, b)
    np.testing.assert_allclose(ga, b, rtol=0, atol=1e-15)
    np.testing.assert_allclose(gb, a, rtol=0, atol=1e-15)


def test_three_layer_chain_matches_finite_differences(rng64):
    W1, W2, W3 = rng64.normal(size=(4, 5)), rng64.normal(size=(5, 3)), rng64.normal(size=(3, 2))
    x = rng64.normal(size=(6, 4))

    def f(w1):
        tape = Tape()
        return float(ag.mean(ag.tanh(ag.tanh(x @ tape.constant(w1)) @ W2) @ W3).data)

    _, (g,) = grad_of(lambda w: ag.mean(ag.tanh(ag.tanh(x @ w) @ W2) @ W3), W1)
    num = finite_difference_gradient(f, W1, eps=1e-5)
    assert np.max(np.abs(g - num)) / np.max(np.abs(num)) < 1e-6


@pytest.mark.parametrize("name", PRIMITIVE_NAMES)
def test_primitive_gradients_on_20_random_inputs(name):
    worst = 0.0
    for seed in range(20):
        build, inputs = primitive_cases(seed)[name]
        err, _ = check_gradients(build, inputs)
        worst = max(worst, err)
    assert worst < 1e-4


def test_backprop_rejects_non_scalar_loss():
    tape = Tape()
    x = tape.variable(np.ones(3))
    with pytest.raises(ShapeError):
        backprop(tape, ag.tanh(x))


def test_backprop_rejects_node_not_on_tape():
    tape = Tape()
    tape.variable(np.ones(1))
    with pytest.raises(KeyError):
        backprop(tape, 7)


def test_gradients_only_reach_dependencies():
    tape = Tape()
    a = tape.variable(np.array([1.0, 2.0]))
    b = tape.variable(np.array([3.0]))
    grads = backprop(tape, ag.sum_(a * a))
    assert b.node not in grads
    np.testing.assert_array_equal(grads[a.node], [2.0, 4.0])


def test_gather_gradient_touches_only_looked_up_rows(rng64):
    table = rng64.normal(size=(5, 3))
    _, (g,) = grad_of(lambda t: ag.sum_(ag.gather(t, np.array([1, 3, 1]))), table)
    np.testing.assert_array_equal(g[[0, 2, 4]], 0.0)
    np.testing.assert_array_equal(g[1], 2.0)
    np.testing.assert_array_equal(g[3], 1.0)


# -- errors -------------------------------------------------------------------


def test_shape_mismatch_raises():
    tape = Tape()
    with pytest.raises(ShapeError):
        tape.constant(np.ones((2, 3))) @ tape.constant(np.ones((2, 3)))
    with pytest.raises(ShapeError):
        tape.constant(np.ones(3)) + tape.constant(np.ones(4))


def test_log_of_negative_raises():
    tape = Tape()
    with pytest.raises(ValueError):
        ag.log(tape.constant(np.array([-1.0])))


def test_log_clamps_zero_to_floor():
    tape = Tape()
    x = tape.variable(np.array([0.0, 1.0]))
    y = ag.log(x)
    np.testing.assert_allclose(y.data, [np.log(1e-12), 0.0])
    g = backprop(tape, ag.sum_(y))[x.node]
    assert np.all(np.isfinite(g))


def test_non_finite_values_are_rejected():
    tape = Tape()
    with pytest.raises(NonFiniteError):
        tape.variable(np.array([np.nan]))
    with pytest.raises(NonFiniteError):
        ag.exp(tape.constant(np.array([1000.0])))


def test_gather_out_of_range():
    tape = Tape()
    with pytest.raises(IndexError):
        ag.gather(tape.constant(np.zeros((3, 2))), np.array([3]))


def test_unknown_primitive():
    tape = Tape()
    with pytest.raises(KeyError):
        tape.apply("nope", tape.constant(np.ones(1)))


# -- tape structure -------------------------------------------------------------


def test_tape_is_topologically_ordered(rng64):
    tape = Tape()
    x = tape.variable(rng64.normal(size=(2, 3)))
    w = tape.variable(rng64.normal(size=(3, 2)))
    ag.mean(ag.softmax(ag.tanh(x @ w)))
    for k, node in enumerate(tape.nodes):
        assert all(i < k for i in node.inputs)


def test_replay_reproduces_forward_values(rng64):
    tape = Tape()
    x = tape.variable(rng64.normal(size=(2, 3)))
    out = ag.sum_(ag.layer_norm(ag.tanh(x)) * 2.0)
    values = tape.replay()
    for node, value in zip(tape.nodes, values):
        np.testing.assert_array_equal(node.value, value)
    shifted = tape.replay({x.node: x.data + 1.0})
    np.testing.assert_allclose(shifted[x.node], x.data + 1.0)


def test_identical_inputs_give_identical_gradients(rng64):
    a = rng64.normal(size=(4, 4))
    _, g1 = grad_of(lambda x: ag.mean(ag.softmax(x @ x)), a)
    _, g2 = grad_of(lambda x: ag.mean(ag.softmax(x @ x)), a)
    np.testing.assert_array_equal(g1[0], g2[0])


# -- finite differences ---------------------------------------------------------


def test_fd_of_square():
    g = finite_difference_gradient(lambda x: float(x[0] ** 2), np.array([3.0]), eps=1e-5)
    assert abs(g[0] - 6.0) < 1e-8


def test_fd_of_constant_is_zero():
    np.testing.assert_array_equal(finite_difference_gradient(lambda x: 4.0, np.ones(3)), np.zeros(3))


def test_fd_of_tanh_sum_at_zero():
    g = finite_difference_gradient(lambda x: float(np.tanh(x).sum()), np.zeros(4))
    np.testing.assert_allclose(g, 1.0, atol=1e-9)


def test_fd_rejects_non_finite():
    with pytest.raises(NonFiniteError):
        finite_difference_gradient(lambda x: float("nan"), np.zeros(1))


# -- property-based -----------------------------------------------------------

finite = st.floats(-50, 50, allow_nan=False, allow_infinity=False)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 4), elements=finite))
def test_primitives_stay_finite(x):
    tape = Tape()
    t = tape.constant(x)
    for out in (ag.sigmoid(t), ag.tanh(t), ag.softmax(t), ag.layer_norm(t), ag.mean(t)):
        assert np.all(np.isfinite(out.data))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (2, 3), elements=finite), arrays(np.float64, (3,), elements=finite))
def test_broadcast_add_gradient_sums_over_batch(a, b):
    _, (ga, gb) = grad_of(lambda x, y: ag.sum_(x + y), a, b)
    np.testing.assert_array_equal(ga, np.ones_like(a))
    np.testing.assert_array_equal(gb, np.full(3, 2.0))
