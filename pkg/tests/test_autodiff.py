import math

import numpy as np
import pytest

from semiseg import autodiff as ad
from semiseg.autodiff import Parameter, Tensor

from oracles import GRAD_RTOL, direct_conv2d, numeric_grad, rel_error, scalar_adam


def _check_op_grads(op, arrays, rng):
    """Compare backward() against central differences of sum(op(*arrays) * R)."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = op(*tensors)
    R = rng.standard_normal(out.shape)
    ad.backward(ad.sum_all(ad.mul(out, Tensor(R))))

    def f():
        with ad.no_grad():
            return float((op(*[Tensor(a) for a in arrays]).data * R).sum())

    for a, t in zip(arrays, tensors):
        num = numeric_grad(f, a)
        assert rel_error(t.grad, num) <= GRAD_RTOL


# --- conv2d -----------------------------------------------------------------

def test_conv2d_identity_kernel():
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    out = ad.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv2d_all_ones_sum():
    out = ad.conv2d(Tensor(np.ones((1, 1, 3, 3))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)))
    assert out.shape == (1, 1, 1, 1)
    assert out.data.item() == 9.0


@pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1), (2, 0)])
def test_conv2d_matches_loop_reference(stride, padding):
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=padding)
    np.testing.assert_allclose(out.data, direct_conv2d(x, w, b, stride, padding), atol=1e-12)


def test_conv2d_gradients_finite_difference():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    _check_op_grads(lambda x, w, b: ad.conv2d(x, w, b, padding=1), [x, w, b], rng)


def test_conv2d_channel_mismatch():
    with pytest.raises(ad.ShapeError, match="channels"):
        ad.conv2d(Tensor(np.zeros((1, 2, 4, 4))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv2d_kernel_too_large():
    with pytest.raises(ad.ShapeError):
        ad.conv2d(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


# --- transposed conv -------------------------------------------------------

def test_transposed_conv_expands_single_value():
    out = ad.transposed_conv2d(Tensor(np.full((1, 1, 1, 1), 2.5)), Tensor(np.ones((1, 1, 2, 2))))
    np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), 2.5))


def test_transposed_conv_zero_kernel():
    rng = np.random.default_rng(1)
    out = ad.transposed_conv2d(Tensor(rng.standard_normal((2, 3, 4, 4))), Tensor(np.zeros((3, 5, 2, 2))))
    assert out.shape == (2, 5, 8, 8)
    assert not out.data.any()


def test_transposed_conv_is_adjoint_of_strided_conv():
    # <conv(x), y> == <x, convT(y)> for matching stride/kernel, no bias
    rng = np.random.default_rng(2)
    w = rng.standard_normal((3, 4, 2, 2))  # conv: 4 -> 3 channels; convT: 3 -> 4
    x = rng.standard_normal((2, 4, 6, 6))
    y = rng.standard_normal((2, 3, 3, 3))
    lhs = (ad.conv2d(Tensor(x), Tensor(w), stride=2).data * y).sum()
    rhs = (x * ad.transposed_conv2d(Tensor(y), Tensor(w), stride=2).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_transposed_conv_overlapping_kernel_adjoint():
    rng = np.random.default_rng(5)
    w = rng.standard_normal((2, 3, 3, 3))
    x = rng.standard_normal((1, 3, 7, 7))
    y = rng.standard_normal((1, 2, 3, 3))
    lhs = (ad.conv2d(Tensor(x), Tensor(w), stride=2).data * y).sum()
    rhs = (x * ad.transposed_conv2d(Tensor(y), Tensor(w), stride=2).data).sum()
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_transposed_conv_gradients_finite_difference():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((2, 3, 3, 3))
    w = rng.standard_normal((3, 2, 2, 2))
    b = rng.standard_normal(2)
    _check_op_grads(lambda x, w, b: ad.transposed_conv2d(x, w, b), [x, w, b], rng)


def test_transposed_conv_channel_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.transposed_conv2d(Tensor(np.zeros((1, 2, 2, 2))), Tensor(np.zeros((3, 1, 2, 2))))


# --- maxpool ---------------------------------------------------------------

def test_maxpool_window_max():
    out = ad.maxpool2d(Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]])))
    assert out.data.item() == 4.0


def test_maxpool_constant():
    out = ad.maxpool2d(Tensor(np.full((1, 2, 4, 6), 1.5)))
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 3), 1.5))


def test_maxpool_gradient_one_per_window():
    rng = np.random.default_rng(6)
    x = Tensor(rng.standard_normal((2, 3, 6, 8)), requires_grad=True)
    ad.backward(ad.sum_all(ad.maxpool2d(x)))
    g = x.grad
    for b in range(2):
        for c in range(3):
            for i in range(0, 6, 2):
                for j in range(0, 8, 2):
                    win = g[b, c, i:i + 2, j:j + 2]
                    assert win.sum() == 1.0 and np.count_nonzero(win) == 1
                    vals = x.data[b, c, i:i + 2, j:j + 2]
                    assert win.ravel().argmax() == vals.ravel().argmax()


def test_maxpool_tie_goes_to_first_row_major():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    ad.backward(ad.sum_all(ad.maxpool2d(x)))
    np.testing.assert_array_equal(x.grad[0, 0], [[1.0, 0.0], [0.0, 0.0]])


def test_maxpool_odd_rejected():
    with pytest.raises(ad.ShapeError):
        ad.maxpool2d(Tensor(np.zeros((1, 1, 5, 4))))


def test_maxpool_gradients_finite_difference():
    rng = np.random.default_rng(7)
    # distinct values spaced well beyond the FD step so no window max changes
    x = (rng.permutation(2 * 2 * 4 * 4) * 0.01).reshape(2, 2, 4, 4)
    _check_op_grads(ad.maxpool2d, [x], rng)


# --- relu / add / concat / softmax ------------------------------------------

def test_relu_values():
    np.testing.assert_array_equal(ad.relu(Tensor(np.array([-1.0, 0.0, 2.0]))).data, [0.0, 0.0, 2.0])
    assert not ad.relu(Tensor(-np.arange(1.0, 5.0))).data.any()


def test_relu_subgradient_at_zero():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)
    ad.backward(ad.sum_all(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_relu_gradients_finite_difference():
    rng = np.random.default_rng(8)
    x = rng.standard_normal((2, 3, 4, 4))
    x = np.sign(x) * (np.abs(x) + 1e-2)
    _check_op_grads(ad.relu, [x], rng)


def test_add_values_and_grad():
    a = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    b = Tensor(np.array([3.0, 4.0]), requires_grad=True)
    s = ad.add(a, b)
    np.testing.assert_array_equal(s.data, [4.0, 6.0])
    np.testing.assert_array_equal(ad.add(a, Tensor(np.zeros(2))).data, a.data)
    ad.backward(ad.sum_all(s))
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])


def test_add_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.add(Tensor(np.zeros(2)), Tensor(np.zeros(3)))


def test_concat_shapes_and_roundtrip():
    rng = np.random.default_rng(9)
    a, b = rng.standard_normal((1, 2, 4, 4)), rng.standard_normal((1, 3, 4, 4))
    out = ad.concat_channels(Tensor(a), Tensor(b))
    assert out.shape == (1, 5, 4, 4)
    np.testing.assert_array_equal(out.data[:, :2], a)
    np.testing.assert_array_equal(out.data[:, 2:], b)
    empty = ad.concat_channels(Tensor(a), Tensor(np.zeros((1, 0, 4, 4))))
    np.testing.assert_array_equal(empty.data, a)


def test_concat_spatial_mismatch():
    with pytest.raises(ad.ShapeError):
        ad.concat_channels(Tensor(np.zeros((1, 1, 4, 4))), Tensor(np.zeros((1, 1, 4, 2))))


def test_concat_gradients_finite_difference():
    rng = np.random.default_rng(10)
    _check_op_grads(ad.concat_channels, [rng.standard_normal((2, 2, 3, 3)), rng.standard_normal((2, 1, 3, 3))], rng)


def test_softmax_uniform_and_hand_value():
    p = ad.softmax_channels(Tensor(np.zeros((1, 4, 2, 2)))).data
    np.testing.assert_allclose(p, 0.25, rtol=0, atol=1e-15)
    logits = np.array([0.0, math.log(3.0)]).reshape(1, 2, 1, 1)
    np.testing.assert_allclose(ad.softmax_channels(Tensor(logits)).data.ravel(), [0.25, 0.75], atol=1e-15)


def test_softmax_shift_invariance_and_normalisation():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 4, 5, 5)) * 10
    k = rng.standard_normal((2, 1, 5, 5)) * 50
    p = ad.softmax_channels(Tensor(x)).data
    np.testing.assert_allclose(ad.softmax_channels(Tensor(x + k)).data, p, atol=1e-12)
    assert np.all(p > 0) and np.all(p < 1)
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)


def test_softmax_gradients_finite_difference():
    rng = np.random.default_rng(12)
    _check_op_grads(ad.softmax_channels, [rng.standard_normal((2, 3, 3, 3))], rng)


# --- backward --------------------------------------------------------------

def test_backward_sum_and_square():
    x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones(3))
    x.zero_grad()
    ad.backward(ad.sum_all(ad.mul(x, x)))
    np.testing.assert_array_equal(x.grad, 2 * x.data)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ad.ShapeError):
        ad.backward(ad.relu(x))


def test_backward_accumulates_over_fan_out():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = ad.add(ad.mul(x, x), x)  # x^2 + x
    ad.backward(ad.sum_all(y))
    np.testing.assert_array_equal(x.grad, [5.0])


def test_backward_visits_each_node_once():
    rng = np.random.default_rng(13)
    x = Tensor(rng.standard_normal((1, 2, 4, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 2, 3, 3)), requires_grad=True)
    h = ad.relu(ad.conv2d(x, w, padding=1))
    y = ad.add(h, x)  # diamond: x reached twice
    z = ad.concat_channels(y, h)
    loss = ad.sum_all(ad.mul(z, z))
    assert ad.backward(loss) == ad.count_graph_ops(loss) == 6


def test_no_grad_records_nothing():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    with ad.no_grad():
        y = ad.relu(x)
    assert not y.requires_grad and y.is_leaf


# --- adam ------------------------------------------------------------------

def test_adam_first_step_is_lr_sign():
    p = Parameter("w", np.array([1.0, -2.0, 0.5]))
    g = np.array([0.5, -3.0, 2.0])
    p.tensor.grad = g.copy()
    before = p.data.copy()
    ad.adam_step([p], lr=1e-3)
    np.testing.assert_allclose(p.data - before, -1e-3 * np.sign(g), rtol=1e-6)
    assert p.step_count == 1 and p.grad is None


def test_adam_zero_gradient():
    p = Parameter("w", np.array([1.0, 2.0]))
    p.adam_m[:] = [0.1, -0.2]
    p.adam_v[:] = [0.01, 0.04]
    p.step_count = 3
    p.tensor.grad = np.zeros(2)
    before = p.data.copy()
    ad.adam_step([p], lr=0.0)
    np.testing.assert_array_equal(p.data, before)
    np.testing.assert_allclose(p.adam_m, [0.09, -0.18])
    np.testing.assert_allclose(p.adam_v, [0.01 * 0.999, 0.04 * 0.999])


def test_adam_zero_gradient_fresh_state_leaves_param():
    p = Parameter("w", np.array([1.0, 2.0]))
    p.tensor.grad = np.zeros(2)
    ad.adam_step([p], lr=0.1)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert not p.adam_m.any() and not p.adam_v.any()


def test_adam_quadratic_converges():
    p = Parameter("w", np.array([0.0]))
    for _ in range(100):
        d = ad.add(p.tensor, Tensor(np.array([-3.0])))
        ad.backward(ad.sum_all(ad.mul(d, d)))
        ad.adam_step([p], lr=0.1)
    reference = scalar_adam(lambda w: 2 * (w - 3.0), 0.0, 0.1, 100)
    assert abs(p.data[0] - 3.0) < 0.5
    assert p.data[0] == pytest.approx(reference, rel=1e-12)


def test_adam_missing_gradient():
    with pytest.raises(ValueError, match="no gradient"):
        ad.adam_step([Parameter("w", np.zeros(2))], lr=0.1)


def test_forward_is_deterministic():
    rng = np.random.default_rng(14)
    x, w = rng.standard_normal((2, 3, 8, 8)), rng.standard_normal((4, 3, 3, 3))
    a = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
    b = ad.conv2d(Tensor(x), Tensor(w), padding=1).data
    assert a.tobytes() == b.tobytes()
