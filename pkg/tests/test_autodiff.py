"""Tensor core: construction, forward semantics, backward rules, and the
finite-difference oracle that every later gradient claim leans on."""

import numpy as np
import pytest

from cosal import autodiff as ad
from cosal.autodiff import Tensor
from cosal.errors import ComputeError, ShapeError, UsageError


def t64(data, requires_grad=False):
    return Tensor(np.asarray(data, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------- construction


def test_zeros_and_constant_fill():
    z = Tensor.zeros((2, 2))
    assert z.shape == (2, 2) and np.all(z.data == 0)
    c = Tensor.full((3,), 1.5)
    assert np.all(c.data == np.float32(1.5))


def test_seeded_uniform_is_reproducible_bitwise():
    a = Tensor.uniform((4,), 0.0, 1.0, seed=7)
    b = Tensor.uniform((4,), 0.0, 1.0, seed=7)
    assert a.data.tobytes() == b.data.tobytes()
    c = Tensor.uniform((4,), 0.0, 1.0, seed=8)
    assert a.data.tobytes() != c.data.tobytes()


def test_explicit_data_length_checked():
    with pytest.raises(ShapeError):
        Tensor.from_data([1.0, 2.0, 3.0], shape=(2, 2))
    with pytest.raises(ShapeError):
        Tensor.zeros(())
    with pytest.raises(ShapeError):
        Tensor.zeros((0, 2))


# ---------------------------------------------------------------- elementwise


def test_elementwise_trivial_values():
    assert np.array_equal(ad.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])
    assert ad.sigmoid(Tensor([0.0])).data[0] == pytest.approx(0.5)
    assert np.array_equal((Tensor([1.0, 2.0]) + Tensor([3.0, 4.0])).data, [4.0, 6.0])


def test_sigmoid_saturates_without_overflow():
    y = ad.sigmoid(Tensor([1000.0, -1000.0]))
    assert np.all(np.isfinite(y.data))
    assert y.data[0] == pytest.approx(1.0) and y.data[1] == pytest.approx(0.0)


def test_div_by_zero_and_log_domain_are_compute_errors():
    with pytest.raises(ComputeError):
        Tensor([1.0]) / Tensor([0.0])
    with pytest.raises(ComputeError):
        ad.log(Tensor([0.0]))
    with pytest.raises(ComputeError):
        ad.log(Tensor([-1.0]))


def test_mixed_dtype_is_rejected():
    with pytest.raises(UsageError):
        Tensor(np.ones(2, dtype=np.float32)) + t64(np.ones(2))


def test_broadcast_trailing_dims():
    x = Tensor(np.ones((2, 3), dtype=np.float32))
    b = Tensor(np.asarray([1.0, 2.0, 3.0], dtype=np.float32))
    assert np.array_equal((x + b).data, [[2, 3, 4], [2, 3, 4]])
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) + Tensor(np.ones((4,)))


def test_clamp_values_and_subgradient():
    x = Tensor([-1.0, 0.5, 2.0], requires_grad=True)
    y = ad.clamp(x, 0.0, 1.0)
    assert np.array_equal(y.data, [0.0, 0.5, 1.0])
    ad.backward(y.sum())
    # saturated coordinates get zero gradient
    assert np.array_equal(x.grad, [0.0, 1.0, 0.0])


# ---------------------------------------------------------------- matmul


def test_matmul_identity_and_ones():
    eye = Tensor(np.eye(2, dtype=np.float32))
    m = Tensor(np.asarray([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32))
    assert np.array_equal((eye @ m).data, m.data)
    a = Tensor([[1.0, 1.0]])
    b = Tensor([[1.0], [1.0]])
    assert (a @ b).data == np.asarray([[2.0]], dtype=np.float32)


def test_matmul_shape_errors():
    with pytest.raises(ShapeError):
        Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))
    with pytest.raises(ShapeError):
        ad.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 2, 2))))


def test_matmul_backward_closed_form():
    # dC/dA = g Bt and dC/dB = At g with g all ones
    a = t64([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    b = t64([[5.0, 6.0], [7.0, 8.0]], requires_grad=True)
    ad.backward((a @ b).sum())
    g = np.ones((2, 2))
    assert np.allclose(a.grad, g @ b.data.T)
    assert np.allclose(b.grad, a.data.T @ g)


def test_batched_matmul_matches_loop():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 2, 4))
    b = rng.normal(size=(3, 4, 5))
    got = ad.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    want = np.stack([a[i] @ b[i] for i in range(3)])
    assert np.allclose(got, want)


def test_order_canonical_matmul_same_value_and_grads():
    rng = np.random.default_rng(1)
    a = rng.normal(size=(2, 3, 4))
    b = rng.normal(size=(2, 4, 3))
    plain = ad.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64)).data
    canon = ad.matmul(Tensor(a, dtype=np.float64), Tensor(b, dtype=np.float64), order_canonical=True).data
    assert np.allclose(plain, canon, atol=1e-12)

    def f(x):
        return ad.matmul(x, Tensor(b, dtype=np.float64), order_canonical=True).sum()

    rep = ad.finite_diff_check(f, Tensor(a, dtype=np.float64))
    assert rep.passed, rep


# ---------------------------------------------------------------- conv2d


def test_conv2d_ones_kernel_sums_window():
    x = Tensor(np.ones((1, 3, 3), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 2, 2), dtype=np.float32))
    b = Tensor.zeros((1,))
    y = ad.conv2d(x, w, b)
    assert y.shape == (1, 2, 2)
    assert np.all(y.data == 4.0)


def test_conv2d_1x1_identity_kernel_is_identity():
    rng = np.random.default_rng(3)
    x = Tensor(rng.random((1, 5, 4), dtype=np.float32))
    w = Tensor(np.ones((1, 1, 1, 1), dtype=np.float32))
    b = Tensor.zeros((1,))
    assert np.array_equal(ad.conv2d(x, w, b).data, x.data)


def test_conv2d_output_size_formula():
    x = Tensor(np.zeros((2, 11, 9), dtype=np.float32))
    w = Tensor(np.zeros((4, 2, 3, 3), dtype=np.float32))
    b = Tensor.zeros((4,))
    assert ad.conv2d(x, w, b, stride=2, pad=1).shape == (4, 6, 5)
    assert ad.conv2d(x, w, b, stride=1, pad=0).shape == (4, 9, 7)


def test_conv2d_kernel_too_large_is_shape_error():
    x = Tensor(np.zeros((1, 2, 2), dtype=np.float32))
    w = Tensor(np.zeros((1, 1, 5, 5), dtype=np.float32))
    with pytest.raises(ShapeError):
        ad.conv2d(x, w, Tensor.zeros((1,)))


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1)])
def test_conv2d_gradients_against_oracle(stride, pad):
    rng = np.random.default_rng(10 + stride * 10 + pad)
    xv = rng.normal(size=(2, 6, 5))
    wv = rng.normal(size=(3, 2, 3, 3))
    bv = rng.normal(size=(3,))

    def run(x, w, b):
        return ad.conv2d(x, w, b, stride=stride, pad=pad).sum()

    rep = ad.finite_diff_check(lambda x: run(x, t64(wv), t64(bv)), t64(xv))
    assert rep.passed, ("x", rep)
    rep = ad.finite_diff_check(lambda w: run(t64(xv), w, t64(bv)), t64(wv))
    assert rep.passed, ("w", rep)
    rep = ad.finite_diff_check(lambda b: run(t64(xv), t64(wv), b), t64(bv))
    assert rep.passed, ("bias", rep)


# ---------------------------------------------------------------- pooling / resize


def test_maxpool2_window_max_and_grad_routing():
    x = Tensor(np.asarray([[[1.0, 2.0], [3.0, 4.0]]], dtype=np.float32), requires_grad=True)
    y = ad.maxpool2(x)
    assert y.shape == (1, 1, 1) and y.data[0, 0, 0] == 4.0
    ad.backward(y.sum())
    assert np.array_equal(x.grad, [[[0.0, 0.0], [0.0, 1.0]]])


def test_maxpool2_rejects_odd_dims():
    with pytest.raises(ShapeError):
        ad.maxpool2(Tensor(np.zeros((1, 3, 4), dtype=np.float32)))


def bilinear_reference(x, factor):
    """Pixel-by-pixel align-corners=false interpolation, written directly
    from the coordinate rule src = (i + 0.5)/factor - 0.5."""
    c, h, w = x.shape
    out = np.zeros((c, h * factor, w * factor), dtype=np.float64)
    for i in range(h * factor):
        sy = (i + 0.5) / factor - 0.5
        y0 = int(np.floor(sy))
        fy = sy - y0
        y0c = min(max(y0, 0), h - 1)
        y1c = min(max(y0 + 1, 0), h - 1)
        for j in range(w * factor):
            sx = (j + 0.5) / factor - 0.5
            x0 = int(np.floor(sx))
            fx = sx - x0
            x0c = min(max(x0, 0), w - 1)
            x1c = min(max(x0 + 1, 0), w - 1)
            top = (1 - fx) * x[:, y0c, x0c] + fx * x[:, y0c, x1c]
            bot = (1 - fx) * x[:, y1c, x0c] + fx * x[:, y1c, x1c]
            out[:, i, j] = (1 - fy) * top + fy * bot
    return out


def test_bilinear_matches_reference_and_preserves_constants():
    rng = np.random.default_rng(4)
    x = rng.random((2, 3, 4))
    got = ad.bilinear_upsample(Tensor(x, dtype=np.float64), 3).data
    assert np.allclose(got, bilinear_reference(x, 3), atol=1e-12)

    const = ad.bilinear_upsample(Tensor.full((1, 2, 2), 0.5), 2)
    assert np.all(const.data == np.float32(0.5))
    notexact = ad.bilinear_upsample(Tensor.full((1, 2, 2), 0.3), 4)
    assert np.allclose(notexact.data, 0.3, atol=1e-6)


def test_bilinear_gradients_against_oracle():
    rng = np.random.default_rng(5)
    xv = rng.normal(size=(2, 3, 3))
    rep = ad.finite_diff_check(lambda x: ad.bilinear_upsample(x, 2).sum(), t64(xv))
    assert rep.passed, rep


def test_pool_or_resize_dispatch():
    x = Tensor(np.ones((1, 2, 2), dtype=np.float32))
    assert ad.pool_or_resize(x, "maxpool2").shape == (1, 1, 1)
    assert ad.pool_or_resize(x, "bilinear_upsample", 2).shape == (1, 4, 4)
    with pytest.raises(UsageError):
        ad.pool_or_resize(x, "nearest")


# ---------------------------------------------------------------- softmax / norm / reduce


def test_softmax_uniform_and_stability():
    y = ad.softmax(Tensor([0.0, 0.0, 0.0]), axis=0)
    assert np.allclose(y.data, 1 / 3)
    y = ad.softmax(Tensor([1000.0, 0.0]), axis=0)
    assert np.all(np.isfinite(y.data))
    assert y.data[0] == pytest.approx(1.0)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(6)
    x = Tensor(rng.normal(size=(7, 5)), dtype=np.float64)
    for canonical in (False, True):
        y = ad.softmax(x, axis=-1, order_canonical=canonical)
        assert np.all(y.data >= 0)
        assert np.allclose(y.data.sum(axis=-1), 1.0, atol=1e-6)


def test_softmax_gradient():
    rng = np.random.default_rng(7)
    xv = rng.normal(size=(3, 4))
    w = rng.normal(size=(3, 4))  # random linear functional, not just sum
    rep = ad.finite_diff_check(lambda x: (ad.softmax(x, axis=-1) * t64(w)).sum(), t64(xv))
    assert rep.passed, rep


def test_layer_norm_hand_cases():
    gain = t64(np.ones(2))
    bias = t64(np.zeros(2))
    flat = ad.layer_norm(t64([[3.0, 3.0]]), gain, bias)
    assert np.allclose(flat.data, 0.0, atol=1e-3)  # zero variance collapses
    pm = ad.layer_norm(t64([[1.0, -1.0]]), gain, bias, eps=1e-12)
    assert np.allclose(pm.data, [[1.0, -1.0]], atol=1e-6)


def test_layer_norm_gradients():
    rng = np.random.default_rng(8)
    xv = rng.normal(size=(3, 5))
    gv = rng.normal(size=(5,))
    bv = rng.normal(size=(5,))
    w = rng.normal(size=(3, 5))

    def run(x, g, b):
        return (ad.layer_norm(x, g, b) * t64(w)).sum()

    assert ad.finite_diff_check(lambda x: run(x, t64(gv), t64(bv)), t64(xv)).passed
    assert ad.finite_diff_check(lambda g: run(t64(xv), g, t64(bv)), t64(gv)).passed
    assert ad.finite_diff_check(lambda b: run(t64(xv), t64(gv), b), t64(bv)).passed


def test_reduce_values_and_mean_gradient():
    assert ad.reduce(Tensor([1.0, 2.0, 3.0]), "mean").data[0] == pytest.approx(2.0)
    assert np.array_equal(ad.reduce(Tensor([[1.0, 2.0], [3.0, 4.0]]), "sum", axis=0).data, [4.0, 6.0])
    x = t64(np.arange(6.0).reshape(2, 3), requires_grad=True)
    ad.backward(x.mean())
    assert np.allclose(x.grad, 1.0 / 6.0)


def test_reduce_axis_shapes():
    x = Tensor(np.ones((2, 3, 4), dtype=np.float32))
    assert ad.reduce(x, "sum", axis=1).shape == (2, 4)
    assert ad.reduce(x, "mean", axis=-1).shape == (2, 3)
    assert ad.reduce(x, "sum").shape == (1,)
    one_d = Tensor(np.ones(5, dtype=np.float32), requires_grad=True)
    s = ad.reduce(one_d, "sum", axis=0)
    assert s.shape == (1,)
    ad.backward(s)
    assert np.array_equal(one_d.grad, np.ones(5, dtype=np.float32))


def test_reduce_order_canonical_same_result():
    rng = np.random.default_rng(9)
    x = rng.normal(size=(4, 3))
    a = ad.reduce(Tensor(x, dtype=np.float64), "mean", axis=0).data
    b = ad.reduce(Tensor(x, dtype=np.float64), "mean", axis=0, order_canonical=True).data
    assert np.allclose(a, b, atol=1e-12)


# ---------------------------------------------------------------- structure ops


def test_concat_and_split_roundtrip():
    a = Tensor([[1.0]])
    b = Tensor([[2.0]])
    joined = ad.concat([a, b], axis=0)
    assert np.array_equal(joined.data, [[1.0], [2.0]])
    back_a = ad.narrow(joined, 0, 0, 1)
    back_b = ad.narrow(joined, 0, 1, 1)
    assert np.array_equal(back_a.data, a.data) and np.array_equal(back_b.data, b.data)


def test_concat_gradient_splits():
    a = t64(np.ones((2, 2)), requires_grad=True)
    b = t64(np.ones((1, 2)), requires_grad=True)
    y = ad.concat([a, b], axis=0)
    ad.backward((y * t64(np.arange(6.0).reshape(3, 2))).sum())
    assert np.array_equal(a.grad, [[0.0, 1.0], [2.0, 3.0]])
    assert np.array_equal(b.grad, [[4.0, 5.0]])


def test_narrow_and_transpose_and_reshape_gradients():
    rng = np.random.default_rng(11)
    xv = rng.normal(size=(4, 3))
    w = rng.normal(size=(2, 3))
    rep = ad.finite_diff_check(lambda x: (ad.narrow(x, 0, 1, 2) * t64(w)).sum(), t64(xv))
    assert rep.passed
    w2 = rng.normal(size=(3, 4))
    rep = ad.finite_diff_check(lambda x: (ad.transpose(x, (1, 0)) * t64(w2)).sum(), t64(xv))
    assert rep.passed
    w3 = rng.normal(size=(12,))
    rep = ad.finite_diff_check(lambda x: (ad.reshape(x, (12,)) * t64(w3)).sum(), t64(xv))
    assert rep.passed


# ---------------------------------------------------------------- backward driver


def test_backward_sum_gives_ones():
    x = t64(np.zeros((2, 3)), requires_grad=True)
    ad.backward(x.sum())
    assert np.array_equal(x.grad, np.ones((2, 3)))


def test_backward_quadratic_analytic():
    x = t64([1.0, 2.0], requires_grad=True)
    ad.backward((x * x).sum())
    assert np.allclose(x.grad, [2.0, 4.0])


def test_backward_accumulates_across_reuse():
    x = t64([3.0], requires_grad=True)
    y = x * x + x  # x used three times
    ad.backward(y.sum())
    assert np.allclose(x.grad, [2 * 3.0 + 1.0])


def test_backward_requires_scalar():
    x = t64(np.ones(3), requires_grad=True)
    with pytest.raises(UsageError):
        ad.backward(x * 2.0)


def test_tape_cleared_after_backward():
    x = t64([1.0], requires_grad=True)
    y = (x * x).sum()
    ad.backward(y)
    first = x.grad.copy()
    ad.backward(y)  # graph is gone: only y's own (empty) tape remains
    assert np.array_equal(x.grad, first)


def test_composite_conv_relu_mean_chain():
    rng = np.random.default_rng(12)
    xv = rng.normal(size=(1, 5, 5))
    wv = rng.normal(size=(2, 1, 3, 3))
    bv = rng.normal(size=(2,))

    def chain(x):
        return ad.relu(ad.conv2d(x, t64(wv), t64(bv), stride=1, pad=0)).mean()

    rep = ad.finite_diff_check(chain, t64(xv))
    assert rep.passed, rep


# ---------------------------------------------------------------- the oracle itself


def test_finite_diff_check_trivial_sum():
    x = t64(np.linspace(-1, 1, 7))
    rep = ad.finite_diff_check(lambda t: t.sum(), x)
    assert rep.max_rel_err <= 1e-10
    assert rep.passed


def test_finite_diff_check_detects_wrong_backward_rule():
    def broken_square(x):
        data = x.data * x.data

        def bad_backward(g):
            x._accumulate(g * 3.0 * x.data)  # wrong factor on purpose

        return ad._node(data, (x,), bad_backward, "broken_square")

    rep = ad.finite_diff_check(lambda t: broken_square(t).sum(), t64([0.7, -0.4]))
    assert not rep.passed


def test_finite_diff_check_requires_float64():
    with pytest.raises(UsageError):
        ad.finite_diff_check(lambda t: t.sum(), Tensor(np.ones(2, dtype=np.float32)))


def test_fixed_seed_forward_is_bitwise_reproducible():
    def run():
        rng = np.random.default_rng(123)
        x = Tensor.uniform((3, 8, 8), -1, 1, rng)
        w = Tensor.uniform((4, 3, 3, 3), -0.5, 0.5, rng)
        b = Tensor.uniform((4,), -0.1, 0.1, rng)
        y = ad.softmax(ad.conv2d(x, w, b, pad=1).reshape((4, 64)), axis=-1)
        return y.data.tobytes()

    assert run() == run()
