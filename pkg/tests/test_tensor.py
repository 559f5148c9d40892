import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import central_diff, rel_err
from fclvit import tensor as T
from fclvit.errors import ContractError, DimensionError
from fclvit.layers import cross_entropy, gelu, layernorm
from fclvit.tensor import Rng, Tensor, backward, matmul, no_grad, rng_normal, softmax_rows


def test_matmul_identity_and_projector():
    m = np.array([[1.0, 2], [3, 4]])
    assert np.array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)
    out = matmul(Tensor([[1.0, 0], [0, 0]]), Tensor([[5.0, 6], [7, 8]]))
    assert np.array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = Rng(3)
    a_np, b_np = rng.normal((3, 4)), rng.normal((4, 2))
    a = Tensor(a_np.copy(), requires_grad=True)
    backward(matmul(a, Tensor(b_np)).sum())
    num = central_diff(lambda: (a_np @ b_np).sum(), a_np)
    assert rel_err(a.grad.reshape(-1), num) < 1e-6


def test_softmax_examples():
    assert np.allclose(softmax_rows(Tensor([[0.0, 0, 0]])).data, 1 / 3, atol=1e-15)
    big = softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert abs(big[0, 0] - 1) < 1e-12 and big[0, 1] < 1e-12
    # direct exp/sum evaluation
    e = [math.exp(v) for v in (1, 2, 3)]
    direct = [x / sum(e) for x in e]
    assert np.allclose(direct, [0.09003057, 0.24472847, 0.66524096], atol=5e-9)
    assert np.allclose(softmax_rows(Tensor([[1.0, 2, 3]])).data[0], direct, atol=1e-15)


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        softmax_rows(Tensor([[np.inf, 0.0]]))


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    y = softmax_rows(Tensor(x)).data
    assert np.all(y >= 0)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-9)
    assert np.allclose(softmax_rows(Tensor(x + c)).data, y, atol=1e-12)


def test_backward_examples():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    backward(w.sum())
    assert np.array_equal(w.grad, np.ones((2, 3)))
    w.zero_grad()
    backward((w * w).sum())
    assert np.array_equal(w.grad, 2 * w.data)


def test_backward_accumulates_without_reset():
    w = Tensor([1.0, 2.0], requires_grad=True)
    backward(w.sum())
    backward(w.sum())
    assert np.array_equal(w.grad, [2.0, 2.0])


def test_backward_rejects_non_scalar():
    w = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        backward(w * 2.0)


def test_tape_released_after_backward():
    w = Tensor([1.0, 2.0], requires_grad=True)
    loss = (w * w).sum()
    backward(loss)
    with pytest.raises(ContractError):
        backward(loss)


def test_no_grad_records_nothing():
    w = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = w * 3.0
    assert not y.requires_grad and y.is_leaf


def test_rng_normal_examples():
    assert np.array_equal(rng_normal(Rng(1), (4, 3), mean=2.5, std=0.0).data, np.full((4, 3), 2.5))
    a, b = rng_normal(Rng(7), (5, 5)), rng_normal(Rng(7), (5, 5))
    assert a.data.tobytes() == b.data.tobytes()
    s = rng_normal(Rng(123), (10_000,), 0.0, 1.0).data
    assert abs(s.mean()) < 0.05
    with pytest.raises(ValueError):
        rng_normal(Rng(1), (2,), std=-1.0)


def test_rng_children_are_keyed_by_full_path():
    r = Rng(5)
    a = r.child(1).child(2).uniform(4)
    b = r.child(3).child(2).uniform(4)
    assert not np.array_equal(a, b)
    assert np.array_equal(a, Rng(5).child(1, 2).uniform(4))


# every differentiable op against central differences ------------------------------

def _check(fn, *shapes, seed=0, positive=False):
    rng = Rng(seed)
    arrs = [rng.normal(s) for s in shapes]
    if positive:
        arrs = [np.abs(a) + 0.5 for a in arrs]
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrs]
    backward(fn(*ts))
    for t, a in zip(ts, arrs):
        def f():
            with no_grad():
                return fn(*[Tensor(x) for x in arrs]).item()
        num = central_diff(f, a)
        assert rel_err(t.grad.reshape(-1), num) < 1e-6


W = np.linspace(-1, 1, 24).reshape(2, 3, 4)


@pytest.mark.parametrize("name,fn,shapes,pos", [
    ("add", lambda a, b: ((a + b) * Tensor(W)).sum(), [(2, 3, 4), (4,)], False),
    ("sub", lambda a, b: ((a - b) * Tensor(W)).sum(), [(2, 3, 4), (3, 1)], False),
    ("mul", lambda a, b: (a * b * Tensor(W)).sum(), [(2, 3, 4), (2, 3, 4)], False),
    ("square", lambda a: (T.square(a) * Tensor(W)).sum(), [(2, 3, 4)], False),
    ("exp", lambda a: (T.exp(a) * Tensor(W)).sum(), [(2, 3, 4)], False),
    ("log", lambda a: (T.log(a) * Tensor(W)).sum(), [(2, 3, 4)], True),
    ("tanh", lambda a: (T.tanh(a) * Tensor(W)).sum(), [(2, 3, 4)], False),
    ("sum_axis", lambda a: (T.square(a.sum(axis=1))).sum(), [(2, 3, 4)], False),
    ("mean_axis", lambda a: (T.square(a.mean(axis=-2, keepdims=True))).sum(), [(2, 3, 4)], False),
    ("reshape", lambda a: (a.reshape(4, 6) * Tensor(W.reshape(4, 6))).sum(), [(2, 3, 4)], False),
    ("transpose", lambda a: (T.square(a.transpose(2, 0, 1)) * Tensor(W.transpose(2, 0, 1))).sum(),
     [(2, 3, 4)], False),
    ("bmm", lambda a, b: T.square(matmul(a, b)).sum(), [(2, 3, 4), (2, 4, 5)], False),
    ("shared_mm", lambda a, b: T.square(matmul(a, b)).sum(), [(2, 3, 4), (4, 5)], False),
    ("softmax", lambda a: (softmax_rows(a) * Tensor(W)).sum(), [(2, 3, 4)], False),
    ("layernorm", lambda a, g, b: (layernorm(a, g, b) * Tensor(W)).sum(), [(2, 3, 4), (4,), (4,)],
     False),
    ("gelu", lambda a: (gelu(a) * Tensor(W)).sum(), [(2, 3, 4)], False),
    ("cross_entropy", lambda a: cross_entropy(a, [0, 2, 1, 2]), [(4, 3)], False),
])
def test_op_gradients(name, fn, shapes, pos):
    _check(fn, *shapes, positive=pos)


def test_same_seed_graph_is_bitwise_reproducible():
    def run():
        rng = Rng(99)
        x = rng_normal(rng, (3, 4), requires_grad=True)
        y = softmax_rows(matmul(x, rng_normal(rng, (4, 4))))
        loss = (y * y).sum()
        backward(loss)
        return loss.data.tobytes(), x.grad.tobytes()

    assert run() == run()


def test_non_finite_results_are_rejected():
    with pytest.raises(FloatingPointError):
        T.log(Tensor([0.0]))
