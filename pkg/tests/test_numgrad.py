import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from egomem import numgrad as ng
from egomem.numgrad import Tape, Tensor
from egomem.numgrad.gradcheck import max_relative_error


def loop_matmul(a, b):
    m, k = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for p in range(k):
                acc += a[i, p] * b[p, j]
            out[i, j] = acc
    return out


def loop_attention(q, k, v, heads, w_out):
    """Scalar-loop multi-head attention on projected q/k/v."""
    lq, d = q.shape
    lk = k.shape[0]
    dh = d // heads
    ctx = np.zeros((lq, d))
    weights = np.zeros((heads, lq, lk))
    for h in range(heads):
        lo = h * dh
        for i in range(lq):
            scores = []
            for j in range(lk):
                s = 0.0
                for c in range(dh):
                    s += q[i, lo + c] * k[j, lo + c]
                scores.append(s / math.sqrt(dh))
            mx = max(scores)
            ex = [math.exp(s - mx) for s in scores]
            tot = sum(ex)
            for j in range(lk):
                weights[h, i, j] = ex[j] / tot
            for c in range(dh):
                acc = 0.0
                for j in range(lk):
                    acc += weights[h, i, j] * v[j, lo + c]
                ctx[i, lo + c] = acc
    return loop_matmul(ctx, w_out), weights


# -- matmul -------------------------------------------------------------------

def test_matmul_identity():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert np.array_equal(ng.matmul(Tensor(np.eye(2)), Tensor(x)).data, x)


def test_matmul_row_by_column():
    assert ng.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_loop_oracle():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(ng.matmul(Tensor(a), Tensor(b)).data, loop_matmul(a, b), rtol=0, atol=1e-12)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ng.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ng.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


# -- softmax ------------------------------------------------------------------

def test_softmax_uniform():
    np.testing.assert_allclose(ng.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)


def test_softmax_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    expected = np.array([math.exp(v) for v in x]) / sum(math.exp(v) for v in x)
    np.testing.assert_allclose(ng.softmax(Tensor(x)).data, expected, rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=8), st.floats(-100, 100))
def test_softmax_shift_invariant_and_normalized(xs, c):
    x = np.array(xs)
    p = ng.softmax(Tensor(x)).data
    np.testing.assert_allclose(ng.softmax(Tensor(x + c)).data, p, atol=1e-12)
    assert (p >= 0).all()
    assert abs(p.sum() - 1.0) < 1e-12


def test_softmax_rejects_nan():
    with pytest.raises(ValueError):
        ng.softmax(Tensor([0.0, float("nan")]))


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_constant_row():
    out = ng.layer_norm(Tensor([5.0, 5.0, 5.0]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-12)


def test_layer_norm_two_values():
    out = ng.layer_norm(Tensor([1.0, 3.0]), Tensor(np.ones(2)), Tensor(np.zeros(2)))
    # mean 2, variance 1: (x - 2) / sqrt(1 + eps)
    expected = np.array([-1.0, 1.0]) / math.sqrt(1.0 + 1e-5)
    np.testing.assert_allclose(out.data, expected, atol=1e-12)
    np.testing.assert_allclose(out.data, [-1.0, 1.0], atol=1e-4)


def test_layer_norm_zero_gain_gives_bias():
    bias = np.array([0.5, -2.0, 3.0])
    out = ng.layer_norm(Tensor([1.0, 7.0, -4.0]), Tensor(np.zeros(3)), Tensor(bias))
    np.testing.assert_array_equal(out.data, bias)


# -- cross entropy ------------------------------------------------------------

def test_cross_entropy_uniform():
    assert ng.cross_entropy(Tensor(np.zeros(5)), 3).item() == pytest.approx(math.log(5), abs=1e-12)
    assert math.log(5) == pytest.approx(1.60944, abs=1e-5)


def test_cross_entropy_confident():
    expected = -math.log(math.exp(10) / (math.exp(10) + math.exp(-10)))
    value = ng.cross_entropy(Tensor([10.0, -10.0]), 0).item()
    assert value == pytest.approx(expected, rel=1e-9)
    assert value == pytest.approx(2.06e-9, rel=1e-2)


def test_cross_entropy_gradient_uniform():
    logits = Tensor(np.zeros(5), requires_grad=True)
    with Tape() as tape:
        loss = ng.cross_entropy(logits, 2)
    tape.backward(loss)
    np.testing.assert_allclose(logits.grad, [0.2, 0.2, -0.8, 0.2, 0.2], atol=1e-15)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(IndexError):
        ng.cross_entropy(Tensor(np.zeros(3)), 3)


# -- backward / tape ----------------------------------------------------------

def test_backward_of_sum_is_ones():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape() as tape:
        loss = ng.sum(w)
    ng.backward(loss)
    np.testing.assert_array_equal(w.grad, np.ones((2, 3)))
    assert len(tape) == 1


def test_backward_matmul_chain_matches_finite_differences():
    rng = np.random.default_rng(1)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
    c = Tensor(rng.normal(size=(5, 2)), requires_grad=True)
    err = max_relative_error(lambda: ng.sum(ng.tanh(ng.matmul(ng.matmul(a, b), c))), [a, b, c])
    assert err < 1e-4


def test_backward_twice_without_reset_raises():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = ng.sum(w)
    tape.backward(loss)
    with pytest.raises(RuntimeError, match="twice"):
        tape.backward(loss)
    tape.reset()
    with tape:
        loss = ng.sum(w)
    tape.backward(loss)
    np.testing.assert_array_equal(w.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        out = ng.scale(w, 2.0)
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(out)


def test_no_recording_outside_tape():
    w = Tensor([1.0], requires_grad=True)
    out = ng.scale(w, 3.0)
    with pytest.raises(RuntimeError):
        ng.backward(out)


# -- Adam ---------------------------------------------------------------------

def test_adam_zero_grad_no_decay_leaves_params():
    p = Tensor([1.0, -2.0], requires_grad=True)
    state = ng.AdamState(lr=1e-2)
    ng.adam_step({"p": p}, state)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adam_first_step_is_minus_lr():
    # m1 = 0.1, v1 = 0.001; bias-corrected m/sqrt(v) = 1 exactly up to eps
    p = Tensor([0.0], requires_grad=True)
    p.grad = np.array([1.0])
    state = ng.AdamState(lr=1e-3)
    ng.adam_step({"p": p}, state)
    expected = -1e-3 * (0.1 / 0.1) / (math.sqrt(0.001 / 0.001) + 1e-8)
    assert p.data[0] == pytest.approx(expected, rel=1e-12)
    assert p.data[0] == pytest.approx(-1e-3, rel=1e-7)


def test_adam_step_counter_increments():
    p = Tensor([0.0], requires_grad=True)
    state = ng.AdamState()
    for expected in (1, 2, 3):
        ng.adam_step({"p": p}, state)
        assert state.t == expected


def test_adam_missing_grad_names_parameter():
    p = Tensor([0.0])
    with pytest.raises(ValueError, match="weights"):
        ng.adam_step({"weights": p}, ng.AdamState())


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=6))
def test_adam_zero_lr_is_identity(gs):
    p = Tensor(np.linspace(-1, 1, len(gs)), requires_grad=True)
    before = p.data.copy()
    p.grad = np.array(gs)
    ng.adam_step({"p": p}, ng.AdamState(lr=0.0, weight_decay=2e-5))
    np.testing.assert_array_equal(p.data, before)


def test_adam_decoupled_weight_decay():
    p = Tensor([2.0], requires_grad=True)
    state = ng.AdamState(lr=0.1, weight_decay=0.5)
    ng.adam_step({"p": p}, state)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0)


# -- attention ----------------------------------------------------------------

def test_attention_single_key_returns_value_projection():
    rng = np.random.default_rng(3)
    v = rng.normal(size=(1, 8))
    w_out = rng.normal(size=(8, 8))
    for _ in range(3):
        q, k = rng.normal(size=(1, 8)), rng.normal(size=(1, 8))
        out, w = ng.attention(Tensor(q), Tensor(k), Tensor(v), 2, Tensor(w_out))
        np.testing.assert_allclose(out.data, v @ w_out, atol=1e-12)
        np.testing.assert_array_equal(w, np.ones((1, 2, 1, 1)))


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(4)
    q, k, v = (Tensor(rng.normal(size=(3, 5, 8))) for _ in range(3))
    _, w = ng.attention(q, k, v, 4, Tensor(rng.normal(size=(8, 8))))
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-5)


def test_attention_matches_loop_oracle():
    q = np.array([[0.3, -0.2, 0.5, 0.1], [0.0, 0.4, -0.3, 0.2]])
    k = np.array([[0.1, 0.2, -0.1, 0.3], [-0.4, 0.1, 0.2, 0.0]])
    v = np.array([[1.0, 0.5, -0.5, 2.0], [0.0, -1.0, 1.5, 0.5]])
    w_out = np.array([[1.0, 0.0, 0.2, 0.0], [0.0, 1.0, 0.0, -0.3], [0.5, 0.0, 1.0, 0.0], [0.0, 0.1, 0.0, 1.0]])
    out, w = ng.attention(Tensor(q), Tensor(k), Tensor(v), 2, Tensor(w_out))
    exp_out, exp_w = loop_attention(q, k, v, 2, w_out)
    np.testing.assert_allclose(out.data, exp_out, rtol=0, atol=1e-10)
    np.testing.assert_allclose(w[0], exp_w, rtol=0, atol=1e-10)


def test_attention_indivisible_width():
    x = Tensor(np.zeros((2, 6)))
    with pytest.raises(ValueError, match="divisible"):
        ng.attention(x, x, x, 4, Tensor(np.eye(6)))


# -- misc ops -----------------------------------------------------------------

def test_window_max_forward():
    x = np.array([[1.0, 5.0], [3.0, 2.0], [0.0, 9.0]])
    out = ng.window_max(Tensor(x), [0, 1, 0], [1, 2, 2])
    np.testing.assert_array_equal(out.data, [[3.0, 5.0], [3.0, 9.0], [3.0, 9.0]])


def test_forward_is_deterministic():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(2, 4, 8))
    w = rng.normal(size=(8, 8))
    a1, _ = ng.attention(Tensor(x), Tensor(x), Tensor(x), 2, Tensor(w))
    a2, _ = ng.attention(Tensor(x), Tensor(x), Tensor(x), 2, Tensor(w))
    assert np.array_equal(a1.data, a2.data)
