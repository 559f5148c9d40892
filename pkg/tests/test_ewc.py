import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff
from fclvit.errors import ContractError
from fclvit.ewc import ConsolidationState, EwcConfig, compute_fisher, consolidate, ewc_penalty
from fclvit.layers import cross_entropy
from fclvit.model import FCLViT, FCLViTConfig
from fclvit.tensor import Rng, Tensor, backward, no_grad, parameter


class ScalarModel:
    """logits = [w*x, 0]; a one-parameter stand-in with a closed-form Fisher."""

    def __init__(self, w):
        self.w = parameter(np.array([w]))

    def consolidated_params(self):
        return [self.w]

    def consolidated_names(self):
        return ["w"]

    def head_params(self, k):
        return []

    def full_forward(self, x, k, rng=None, training=False):
        x = Tensor(np.asarray(x, float).reshape(-1, 1))
        return (x * self.w).reshape(-1, 1) @ Tensor([[1.0, 0.0]])


def test_scalar_fisher_closed_form():
    xs = np.array([0.5, -1.0, 2.0, 0.1])
    w = 0.7
    fisher = compute_fisher(ScalarModel(w), xs, np.zeros(4, int), 0)[0][0]
    sig = 1 / (1 + np.exp(-w * xs))
    assert abs(fisher - np.mean(xs ** 2 * (1 - sig) ** 2)) < 1e-15


def _tiny(seed=0, **kw):
    cfg = dict(depth=2, dim=8, heads=2, image_side=4, patch_side=2, channels=1)
    cfg.update(kw)
    m = FCLViT(FCLViTConfig(**cfg), Rng(seed))
    m.freeze()
    k = m.add_task_head([0, 1, 2])
    m.heads[k].layer.weight.data[...] = Rng(seed + 1).normal((3, 8))
    return m, k


def test_fisher_matches_finite_difference_per_sample():
    m, k = _tiny(2)
    x = Rng(3).uniform((3, 1, 4, 4))
    y = np.array([0, 2, 1])
    fisher = compute_fisher(m, x, y, k)
    target = m.tsbs[1].h1.data
    idx = [0, 9, 30, 63]
    sq = np.zeros(len(idx))
    for i in range(3):
        def loss():
            with no_grad():
                return cross_entropy(m.full_forward(x[i:i + 1], k), y[i:i + 1]).item()
        sq += central_diff(loss, target, h=1e-5, idx=idx) ** 2
    est = fisher[2].reshape(-1)[idx]
    assert np.allclose(est, sq / 3, rtol=1e-5, atol=1e-12)


def test_fisher_zero_when_head_is_zero():
    m = FCLViT(FCLViTConfig(depth=1, dim=8, heads=2, image_side=4, patch_side=2, channels=1), Rng(4))
    m.freeze()
    k = m.add_task_head([0, 1])
    fisher = compute_fisher(m, Rng(5).uniform((4, 1, 4, 4)), np.array([0, 1, 1, 0]), k)
    assert all(not f.any() for f in fisher)


def test_fisher_sample_order_invariant_and_grads_untouched():
    m, k = _tiny(6)
    x, y = Rng(7).uniform((5, 1, 4, 4)), np.array([0, 1, 2, 1, 0])
    a = compute_fisher(m, x, y, k)
    perm = np.array([3, 0, 4, 2, 1])
    b = compute_fisher(m, x[perm], y[perm], k)
    assert all(np.allclose(u, v, rtol=1e-12, atol=0) for u, v in zip(a, b))
    assert all(p.grad is None for p in m.tsb_params() + m.head_params(k))


def test_fisher_rejects_empty():
    m, k = _tiny(8)
    with pytest.raises(ValueError):
        compute_fisher(m, np.zeros((0, 1, 4, 4)), np.zeros(0, int), k)


def _state(anchor, fisher):
    return ConsolidationState(["p"], [np.asarray(anchor, float)], [np.asarray(fisher, float)], 1)


def test_penalty_hand_evaluation():
    p = parameter(np.array([1.5]))
    pen = ewc_penalty([p], _state([1.0], [2.0]), 3.0)
    assert pen.item() == 0.75
    backward(pen)
    assert p.grad[0] == 3.0


def test_penalty_zero_cases():
    p = parameter(np.array([0.3, -0.2]))
    assert ewc_penalty([p], _state(p.data.copy(), [5.0, 1.0]), 100.0).item() == 0.0
    assert ewc_penalty([p], _state([9.0, 9.0], [5.0, 1.0]), 0.0).item() == 0.0
    assert ewc_penalty([p], ConsolidationState(), 100.0).item() == 0.0
    with pytest.raises(ContractError):
        ewc_penalty([p], _state([1.0], [1.0]), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(-5, 5), st.floats(0, 10))
def test_penalty_monotone_in_lambda(l1, l2, delta, f):
    p = parameter(np.array([delta]))
    s = _state([0.0], [f])
    lo, hi = sorted((l1, l2))
    assert ewc_penalty([p], s, lo).item() <= ewc_penalty([p], s, hi).item()


def test_consolidate_anchor_and_additivity():
    m, k = _tiny(9)
    x, y = Rng(10).uniform((4, 1, 4, 4)), np.array([0, 1, 2, 0])
    s1 = consolidate(m, ConsolidationState(), x, y, k, EwcConfig())
    assert s1.tasks_consolidated == 1 and s1.names == m.consolidated_names()
    assert all(np.array_equal(a, p.data) for a, p in zip(s1.anchor, m.tsb_params()))
    assert ewc_penalty(m.tsb_params(), s1, 100.0).item() == 0.0
    est = compute_fisher(m, x, y, k)
    assert all(np.array_equal(f, e) for f, e in zip(s1.fisher, est))
    s2 = consolidate(m, s1, x, y, k, EwcConfig())
    assert all(np.array_equal(f2, 2 * f1) for f1, f2 in zip(s1.fisher, s2.fisher))
    s3 = consolidate(m, s1, x, y, k, EwcConfig(fisher_mode="replace"))
    assert all(np.array_equal(f3, f1) for f1, f3 in zip(s1.fisher, s3.fisher))


def test_ewc_config_guards():
    with pytest.raises(ValueError):
        EwcConfig(lam=-1)
    with pytest.raises(ValueError):
        EwcConfig(fisher_mode="average")
