import numpy as np
import pytest

from sar import autograd as ag
from sar.optim import Adam


def numeric_grad(f, x, eps=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        hi = f()
        x[i] = old - eps
        lo = f()
        x[i] = old
        g[i] = (hi - lo) / (2 * eps)
    return g


def check(build, *shapes, seed=0, tol=1e-6):
    rng = np.random.default_rng(seed)
    xs = [ag.Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    w = None

    def value():
        nonlocal w
        out = build(*xs)
        if w is None:
            w = np.random.default_rng(seed + 1).normal(size=out.shape)
        return float((out.data * w).sum())

    value()
    out = build(*xs)
    out.backward(w)
    for x in xs:
        num = numeric_grad(value, x.data)
        np.testing.assert_allclose(x.grad, num, rtol=tol, atol=tol)


def test_add_mul_broadcast():
    check(lambda a, b: ag.add(a, b), (3, 4), (4,))
    check(lambda a, b: ag.mul(a, b), (2, 3, 4), (3, 1))


def test_scale_and_operators():
    check(lambda a, b: (a - b) * 2.5 + (-a) * b, (3, 2), (3, 2))


def test_matmul_batched_and_transposed():
    check(lambda a, b: ag.matmul(a, b), (2, 3, 4), (4, 5))
    check(lambda a, b: ag.matmul(a, b, transpose_b=True), (2, 3, 4), (2, 5, 4))
    check(lambda a, b: ag.matmul(a, b), (2, 2, 3, 4), (2, 4, 3))


def test_pointwise_nonlinearities():
    check(lambda a: ag.tanh(a), (4, 3))
    check(lambda a: ag.sigmoid(a), (4, 3))
    check(lambda a: ag.relu(ag.add(a, 0.05)), (5,))


def test_softmax_with_mask():
    mask = np.array([[True, True, False, True], [True, False, False, False]])
    check(lambda a: ag.softmax(a, mask), (2, 4))
    y = ag.softmax(ag.Tensor(np.zeros((2, 4))), mask).data
    assert y[0, 2] == 0.0 and y[1, 0] == 1.0


def test_shape_ops():
    check(lambda a: ag.sum_axis(a, 1), (3, 4))
    check(lambda a: ag.sum_axis(a, 0, keepdims=True), (3, 4))
    check(lambda a: ag.reshape(a, (6, 2)), (3, 4))
    check(lambda a: ag.broadcast_to(a, (3, 2, 4)), (2, 1))
    check(lambda a, b: ag.concat([a, b], axis=1), (2, 3), (2, 1))
    check(lambda a: ag.mean(a), (3, 3))
    check(lambda a: ag.take(a, 2, axis=1), (3, 4, 2))


def test_gather_rows_accumulates_repeats():
    table = ag.Tensor(np.arange(12.0).reshape(4, 3), requires_grad=True)
    out = ag.gather_rows(table, np.array([[0, 2], [2, 2]]))
    out.backward(np.ones(out.shape))
    assert table.grad[:, 0].tolist() == [1.0, 0.0, 3.0, 0.0]
    check(lambda t: ag.gather_rows(t, np.array([1, 1, 3])), (5, 2))


def test_bce_with_logits_mean_gradient():
    t = np.array([0.0, 0.3, 1.0, 0.6])
    check(lambda z: ag.bce_with_logits_mean(z, t), (4,))


def test_shared_node_gradients_sum():
    x = ag.Tensor(np.array([1.5, -2.0]), requires_grad=True)
    y = ag.mul(x, x)
    ag.add(y, x).backward(np.ones(2))
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def _adam_reference(theta, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for step, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        theta = theta - lr * (m / (1 - b1**step)) / (np.sqrt(v / (1 - b2**step)) + eps)
    return theta


def test_adam_matches_textbook_update():
    rng = np.random.default_rng(4)
    grads = [rng.normal(size=3) for _ in range(5)]
    p = ag.Tensor(np.array([0.1, -0.2, 0.3]), requires_grad=True)
    opt = Adam({"p": p}, lr=0.01)
    for g in grads:
        p.grad = g.copy()
        opt.step()
    np.testing.assert_allclose(p.data, _adam_reference(np.array([0.1, -0.2, 0.3]), grads, 0.01), rtol=1e-14)


@pytest.mark.parametrize("lr", [0.0])
def test_adam_zero_lr_is_a_no_op(lr):
    p = ag.Tensor(np.ones(3), requires_grad=True)
    opt = Adam({"p": p}, lr=lr)
    p.grad = np.ones(3)
    opt.step()
    assert p.data.tolist() == [1.0, 1.0, 1.0]
