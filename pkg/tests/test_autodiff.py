"""Tensor engine tests: forward values against closed forms, adjoints
against the central finite-difference oracle."""

import numpy as np
import pytest

from canids import autodiff as ad
from canids.autodiff import (
    LabelOutOfRange,
    NonScalarRoot,
    NumericalError,
    ShapeMismatch,
    Tensor,
)

from util import finite_diff, rel_err


def test_matmul_identity():
    x = np.arange(4.0).reshape(2, 2)
    out = ad.matmul(Tensor(np.eye(2)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_small_product():
    out = ad.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]]))
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    a_val = rng.normal(size=(3, 3))
    b_val = rng.normal(size=(3, 3))
    a = ad.parameter(a_val.copy())
    b = ad.parameter(b_val.copy())
    ad.tsum(ad.matmul(a, b)).backward()

    fd_a = finite_diff(lambda: float((a.data @ b_val).sum()), a.data)
    fd_b = finite_diff(lambda: float((a_val @ b.data).sum()), b.data)
    assert rel_err(a.grad, fd_a) <= 1e-6
    assert rel_err(b.grad, fd_b) <= 1e-6


def test_conv2d_identity_kernel():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 1, 3, 3))
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_all_ones():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 4.0))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 0), (2, 1)])
def test_conv2d_output_shape(stride, padding):
    x = Tensor(np.zeros((2, 3, 9, 7)))
    k = Tensor(np.zeros((4, 3, 3, 3)))
    out = ad.conv2d(x, k, stride=stride, padding=padding)
    h = (9 + 2 * padding - 3) // stride + 1
    w = (7 + 2 * padding - 3) // stride + 1
    assert out.shape == (2, 4, h, w)


def test_conv2d_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        ad.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients_match_finite_differences(stride, padding):
    rng = np.random.default_rng(11)
    x_val = rng.normal(size=(1, 2, 5, 5))
    k_val = rng.normal(size=(3, 2, 3, 3))
    x = ad.parameter(x_val.copy())
    k = ad.parameter(k_val.copy())
    ad.tsum(ad.conv2d(x, k, stride=stride, padding=padding)).backward()

    def loss_from_arrays(xa, ka):
        return lambda: float(
            ad.conv2d(Tensor(xa), Tensor(ka), stride=stride, padding=padding).data.sum()
        )

    assert rel_err(k.grad, finite_diff(loss_from_arrays(x_val, k.data), k.data)) <= 1e-5
    assert rel_err(x.grad, finite_diff(loss_from_arrays(x.data, k_val), x.data)) <= 1e-5


def test_relu_values_and_gradient():
    x = ad.parameter(np.array([-2.0, -0.5, 0.5, 3.0]))
    out = ad.relu(x)
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 0.5, 3.0])
    ad.tsum(out * out).backward()
    fd = finite_diff(lambda: float((np.maximum(x.data, 0) ** 2).sum()), x.data)
    assert rel_err(x.grad, fd) <= 1e-6


def test_max_pool_values_and_gradient():
    x_val = np.array(
        [[[[1.0, 2.0, 5.0, 1.0], [3.0, 4.0, 0.0, 1.0], [7.0, 1.0, 1.0, 2.0], [0.0, 2.0, 3.0, 9.0]]]]
    )
    x = ad.parameter(x_val.copy())
    out = ad.max_pool2d(x, size=2)
    np.testing.assert_array_equal(out.data, [[[[4.0, 5.0], [7.0, 9.0]]]])
    ad.tsum(out * out).backward()

    def f():
        # reshape-based pooling oracle, valid because size == stride == 2
        win = x.data.reshape(1, 1, 2, 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return float((win.reshape(1, 1, 2, 2, 4).max(-1) ** 2).sum())

    assert rel_err(x.grad, finite_diff(f, x.data)) <= 1e-6


def test_max_pool_drops_trailing_odd_column():
    x = Tensor(np.arange(15.0).reshape(1, 1, 3, 5))
    out = ad.max_pool2d(x, size=2)
    assert out.shape == (1, 1, 1, 2)


def test_softmax_uniform_and_normalization():
    out = ad.softmax(Tensor(np.zeros((1, 5))))
    np.testing.assert_allclose(out.data, 0.2)
    rng = np.random.default_rng(3)
    out = ad.softmax(Tensor(rng.normal(size=(4, 5), scale=3.0)))
    np.testing.assert_allclose(out.data.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    x = ad.parameter(rng.normal(size=(2, 5)))
    weights = rng.normal(size=(2, 5))
    ad.tsum(ad.softmax(x) * Tensor(weights)).backward()

    def f():
        e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
        return float(((e / e.sum(axis=1, keepdims=True)) * weights).sum())

    assert rel_err(x.grad, finite_diff(f, x.data)) <= 1e-5


def test_log_softmax_rows_normalize():
    rng = np.random.default_rng(9)
    out = ad.log_softmax(Tensor(rng.normal(size=(6, 5), scale=4.0)))
    np.testing.assert_allclose(np.exp(out.data).sum(axis=1), 1.0, atol=1e-9)


def test_log_softmax_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    x = ad.parameter(rng.normal(size=(3, 4)))
    weights = rng.normal(size=(3, 4))
    ad.tsum(ad.log_softmax(x) * Tensor(weights)).backward()

    def f():
        shifted = x.data - x.data.max(axis=1, keepdims=True)
        ls = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        return float((ls * weights).sum())

    assert rel_err(x.grad, finite_diff(f, x.data)) <= 1e-5


def test_cross_entropy_perfect_prediction_is_zero():
    log_probs = np.full((3, 5), -50.0)
    log_probs[np.arange(3), [0, 2, 4]] = 0.0
    out = ad.cross_entropy(Tensor(log_probs), np.array([0, 2, 4]))
    assert out.item() == 0.0


def test_cross_entropy_uniform_is_log5():
    log_probs = np.full((4, 5), np.log(0.2))
    out = ad.cross_entropy(Tensor(log_probs), np.array([0, 1, 2, 3]))
    assert abs(out.item() - np.log(5)) <= 1e-12


def test_cross_entropy_matches_loop_oracle():
    rng = np.random.default_rng(17)
    logits = rng.normal(size=(8, 5))
    labels = rng.integers(0, 5, size=8)
    log_probs = logits - np.log(np.exp(logits).sum(axis=1, keepdims=True))
    out = ad.cross_entropy(Tensor(log_probs), labels)
    expected = 0.0
    for i in range(8):
        expected += -log_probs[i, labels[i]]
    expected /= 8
    assert abs(out.item() - expected) <= 1e-12


def test_cross_entropy_label_out_of_range():
    lp = Tensor(np.full((2, 5), np.log(0.2)))
    with pytest.raises(LabelOutOfRange):
        ad.cross_entropy(lp, np.array([0, 5]))
    with pytest.raises(LabelOutOfRange):
        ad.cross_entropy(lp, np.array([-1, 0]))


def test_backward_square():
    x = ad.parameter(np.array(3.0))
    (x * x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_unused_leaf_gets_zero():
    x = ad.parameter(np.array(2.0))
    y = ad.parameter(np.array(5.0))
    grads = ad.grad(x * 1.0, wrt=[x, y])
    assert grads[0] == pytest.approx(1.0)
    assert grads[1] == pytest.approx(0.0)


def test_backward_requires_scalar_root():
    x = ad.parameter(np.ones((2, 2)))
    with pytest.raises(NonScalarRoot):
        (x * x).backward()


def test_backward_visits_each_node_once():
    x = ad.parameter(np.array(1.5))
    shared = x * x  # consumed twice below: a diamond in the graph
    root = shared * shared + shared
    root.backward()
    seen = []
    stack = [root]
    while stack:
        node = stack.pop()
        if node in seen:
            continue
        seen.append(node)
        stack.extend(node.parents)
    assert all(n.backward_visits == 1 for n in seen)
    # d/dx (x^4 + x^2) = 4x^3 + 2x
    assert x.grad == pytest.approx(4 * 1.5**3 + 2 * 1.5)


def test_composite_network_gradient_matches_finite_differences():
    rng = np.random.default_rng(23)
    x_val = rng.normal(size=(2, 1, 6, 6))
    k = ad.parameter(rng.normal(size=(2, 1, 3, 3), scale=0.5))
    b = ad.parameter(rng.normal(size=(2, 1, 1), scale=0.1))
    w = ad.parameter(rng.normal(size=(2 * 2 * 2, 5), scale=0.5))
    labels = np.array([1, 3])

    def run():
        h = ad.relu(ad.conv2d(Tensor(x_val), k, stride=1, padding=0) + b)
        h = ad.max_pool2d(h, size=2)
        logits = ad.matmul(ad.flatten(h), w)
        return ad.cross_entropy(ad.log_softmax(logits), labels)

    run().backward()
    for p in (k, b, w):
        fd = finite_diff(lambda: run().item(), p.data)
        assert rel_err(p.grad, fd) <= 1e-4


def test_non_finite_values_raise():
    with pytest.raises(NumericalError):
        Tensor(np.array([1.0, np.inf]))
    with pytest.raises(NumericalError):
        ad.log(Tensor(np.array([0.0])))
    with pytest.raises(NumericalError):
        ad.log(Tensor(np.array([-1.0])))
    with pytest.raises(NumericalError):
        ad.exp(Tensor(np.array([1000.0])))


def test_bias_broadcast_add_gradient():
    rng = np.random.default_rng(29)
    x_val = rng.normal(size=(4, 3))
    b = ad.parameter(rng.normal(size=(3,)))
    ad.tsum((Tensor(x_val) + b) * (Tensor(x_val) + b)).backward()
    fd = finite_diff(lambda: float(((x_val + b.data) ** 2).sum()), b.data)
    assert rel_err(b.grad, fd) <= 1e-6
