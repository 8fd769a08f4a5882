"""Autodiff core: op correctness, backward plumbing, finite-difference oracle."""

import numpy as np
import pytest

from bendlens.nn import Adam, DivergenceError, Tensor, grad_check, softmax, log_softmax
from bendlens.nn.gradcheck import numeric_grad
from bendlens.nn.tensor import GraphError


def test_hand_gradient_sum_of_squares():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = (w * w).sum()
    loss.backward()
    assert np.allclose(w.grad, [2.0, 4.0])


def test_constant_loss_zero_gradient():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    loss = Tensor(3.0) + (w * 0.0).sum()
    loss.backward()
    assert np.allclose(w.grad, 0.0)


def test_sigmoid_gradient_matches_finite_difference():
    w = Tensor(np.array(0.0), requires_grad=True)
    c = 1.7

    def loss():
        return w.sigmoid() * c

    loss().backward()
    numeric = numeric_grad(loss, w, eps=1e-6)
    assert abs(w.grad - numeric) / max(abs(numeric), 1e-8) <= 1e-6


def test_backward_rejects_non_scalar():
    w = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        (w * 2.0).backward()


def test_gradient_accumulates_over_shared_leaf():
    w = Tensor(np.array([3.0]), requires_grad=True)
    loss = (w * 2.0 + w * 5.0).sum()
    loss.backward()
    assert np.allclose(w.grad, 7.0)


def test_broadcast_add_unbroadcasts_gradient():
    a = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.ones(3), requires_grad=True)
    ((a + b) ** 2.0).sum().backward()
    assert a.grad.shape == (4, 3)
    assert b.grad.shape == (3,)
    assert np.allclose(b.grad, 16.0)  # d/db sum (1+1)^2 over 4 rows


def test_matmul_gradients():
    rng = np.random.default_rng(0)
    a = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    b = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    t = rng.normal(size=(3, 2))
    err = grad_check(lambda: (((a @ b) - Tensor(t)) ** 2.0).sum(), {"a": a, "b": b})
    assert err <= 1e-6


@pytest.mark.parametrize("op", ["exp", "log", "sqrt", "sigmoid"])
def test_elementwise_op_gradients(op):
    rng = np.random.default_rng(1)
    x = Tensor(rng.uniform(0.5, 2.0, size=(3, 5)), requires_grad=True)
    w = rng.normal(size=(3, 5))
    err = grad_check(lambda: (getattr(x, op)() * Tensor(w)).sum(), {"x": x})
    assert err <= 1e-5


def test_reduction_and_shape_op_gradients():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = rng.normal(size=(4, 6))

    def loss():
        return ((x.mean(axis=(0, 1)).reshape(1, 4) @ Tensor(w)) ** 2.0).sum()

    assert grad_check(loss, {"x": x}) <= 1e-6


def test_max_axis_gradient_routes_to_argmax():
    x = Tensor(np.array([[1.0, 5.0, 2.0], [7.0, 0.0, 3.0]]), requires_grad=True)
    x.max(axis=1).sum().backward()
    assert np.array_equal(x.grad, [[0, 1, 0], [1, 0, 0]])


def test_getitem_and_concat_gradients():
    rng = np.random.default_rng(3)
    a = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    b = Tensor(rng.normal(size=(2, 3)), requires_grad=True)

    def loss():
        joined = Tensor.concat([a[:2], b], axis=0)
        return (joined ** 2.0).sum()

    assert grad_check(loss, {"a": a, "b": b}) <= 1e-6


def test_clip_gradient_is_identity_inside_and_zero_outside():
    x = Tensor(np.array([-2.0, 0.5, 2.0]), requires_grad=True)
    x.clip(-1.0, 1.0).sum().backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


def test_softmax_rows_sum_to_one():
    logits = Tensor(np.random.default_rng(4).normal(size=(5, 7)) * 10)
    p = softmax(logits).data
    assert np.allclose(p.sum(axis=1), 1.0, atol=1e-9)
    lp = log_softmax(logits).data
    assert np.allclose(np.exp(lp).sum(axis=1), 1.0, atol=1e-9)


def test_grad_check_rejects_bad_eps():
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(ValueError):
        grad_check(lambda: (w * w).sum(), {"w": w}, eps=1e-2)


def test_adam_deterministic_and_decreasing():
    def run():
        w = Tensor(np.array([5.0, -3.0]), requires_grad=True)
        opt = Adam({"w": w}, lr=0.1)
        losses = []
        for _ in range(50):
            opt.zero_grad()
            loss = (w * w).sum()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return w.data.copy(), losses

    w1, l1 = run()
    w2, l2 = run()
    assert np.array_equal(w1, w2)
    assert l1 == l2
    assert l1[-1] < l1[0]


def test_adam_rejects_non_finite_gradient():
    w = Tensor(np.array([1.0]), requires_grad=True)
    opt = Adam({"w": w}, lr=0.1)
    w.grad = np.array([np.nan])
    with pytest.raises(DivergenceError, match="w"):
        opt.step()
