import math

import numpy as np
import pytest

from reefl.errors import NonFiniteError, ShapeError
from reefl.numerics import (
    Tensor,
    concat,
    cross_entropy,
    gelu,
    grad_check,
    kl_divergence,
    layer_norm,
    log_softmax,
    matmul,
    narrow,
    no_grad,
    softmax,
    stack,
    tmean,
    transpose,
    tsum,
)
from reefl.numerics.tensor import _from_op


def randn(rng, *shape):
    return Tensor(rng.standard_normal(shape), dtype=np.float64)


def param(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True, dtype=np.float64)


# -- matmul ----------------------------------------------------------------


def test_matmul_identity():
    eye = Tensor(np.eye(2))
    m = Tensor([[1.0, 2.0], [3.0, 4.0]])
    out = matmul(eye, m)
    np.testing.assert_array_equal(out.data, m.data)


def test_matmul_analytic():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0], [4.0]])
    assert matmul(a, b).item() == 11.0


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_grad_matches_fd():
    rng = np.random.default_rng(0)
    a = param(rng, 3, 4)
    b = param(rng, 4, 2)
    report = grad_check(lambda: tsum(matmul(a, b)), {"a": a, "b": b})
    assert report.passed, report


def test_matmul_batched_grad():
    rng = np.random.default_rng(1)
    a = param(rng, 2, 3, 4)
    w = param(rng, 4, 5)
    report = grad_check(lambda: tsum(matmul(a, w)), {"a": a, "w": w})
    assert report.passed, report


# -- layer norm --------------------------------------------------------------


def test_layer_norm_constant_row_is_zero():
    x = Tensor(np.full((2, 4), 3.7))
    out = layer_norm(x, Tensor(np.ones(4)), Tensor(np.zeros(4)))
    np.testing.assert_allclose(out.data, 0.0, atol=1e-6)


def test_layer_norm_already_normalized():
    x = Tensor(np.array([[1.0, -1.0]]), dtype=np.float64)
    out = layer_norm(x, Tensor(np.ones(2), dtype=np.float64), Tensor(np.zeros(2), dtype=np.float64), eps=1e-12)
    np.testing.assert_allclose(out.data, [[1.0, -1.0]], atol=1e-6)


def test_layer_norm_grad_matches_fd():
    rng = np.random.default_rng(2)
    x = param(rng, 3, 5)
    g = param(rng, 5)
    b = param(rng, 5)
    report = grad_check(lambda: tsum(layer_norm(x, g, b)), {"x": x, "gamma": g, "beta": b})
    assert report.passed, report


# -- softmax ------------------------------------------------------------------


def test_softmax_symmetry():
    out = softmax(Tensor([0.0, 0.0, 0.0]).reshape(1, 3))
    np.testing.assert_allclose(out.data, 1.0 / 3.0, atol=1e-7)


def test_softmax_overflow_safe():
    out = softmax(Tensor([1000.0, 1000.0]).reshape(1, 2))
    np.testing.assert_allclose(out.data, 0.5)


def test_softmax_analytic():
    out = softmax(Tensor([0.0, math.log(3.0)], dtype=np.float64).reshape(1, 2))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((10, 7)) * 5, dtype=np.float64)
    out = softmax(x)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)
    assert (out.data > 0).all()


def test_softmax_shift_invariance():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((4, 6))
    a = softmax(Tensor(x, dtype=np.float64))
    b = softmax(Tensor(x + 13.25, dtype=np.float64))
    np.testing.assert_allclose(a.data, b.data, atol=1e-12)


def test_softmax_grad_matches_fd():
    rng = np.random.default_rng(5)
    x = param(rng, 2, 4)
    w = Tensor(rng.standard_normal((2, 4)), dtype=np.float64)
    report = grad_check(lambda: tsum(softmax(x) * w), {"x": x})
    assert report.passed, report


def test_log_softmax_grad_matches_fd():
    rng = np.random.default_rng(6)
    x = param(rng, 2, 4)
    w = Tensor(rng.standard_normal((2, 4)), dtype=np.float64)
    report = grad_check(lambda: tsum(log_softmax(x) * w), {"x": x})
    assert report.passed, report


# -- cross entropy --------------------------------------------------------------


def test_cross_entropy_uniform():
    logits = Tensor(np.zeros((3, 4)), dtype=np.float64)
    loss = cross_entropy(logits, np.array([0, 1, 3]))
    assert abs(loss.item() - math.log(4.0)) < 1e-12


def test_cross_entropy_confident_is_zero():
    logits = np.zeros((1, 4))
    logits[0, 2] = 1e6
    loss = cross_entropy(Tensor(logits, dtype=np.float64), np.array([2]))
    assert loss.item() < 1e-9


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        cross_entropy(Tensor(np.zeros((2, 3))), np.array([0, 3]))


def test_cross_entropy_grad_matches_fd():
    rng = np.random.default_rng(7)
    x = param(rng, 4, 5)
    labels = np.array([0, 2, 4, 1])
    report = grad_check(lambda: cross_entropy(x, labels), {"x": x})
    assert report.passed, report


def test_cross_entropy_backward_formula():
    rng = np.random.default_rng(8)
    x = param(rng, 3, 4)
    labels = np.array([1, 0, 3])
    loss = cross_entropy(x, labels)
    loss.backward()
    p = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    p[np.arange(3), labels] -= 1.0
    np.testing.assert_allclose(x.grad, p / 3.0, atol=1e-12)


# -- KL divergence -----------------------------------------------------------


def test_kl_identity_is_zero():
    p = Tensor([0.2, 0.3, 0.5], dtype=np.float64)
    assert kl_divergence(p, p).item() == 0.0


def test_kl_analytic():
    p = Tensor([1.0, 0.0], dtype=np.float64)
    q = Tensor([0.5, 0.5], dtype=np.float64)
    assert abs(kl_divergence(p, q).item() - math.log(2.0)) < 1e-12


def test_kl_matches_scalar_loop():
    rng = np.random.default_rng(9)
    for _ in range(20):
        p = rng.dirichlet(np.ones(6))
        q = rng.dirichlet(np.ones(6))
        got = kl_divergence(Tensor(p, dtype=np.float64), Tensor(q, dtype=np.float64)).item()
        want = sum(pi * math.log(pi / qi) for pi, qi in zip(p, q) if pi > 0)
        assert abs(got - want) < 1e-10
        assert got >= -1e-12


def test_kl_near_zero_q_stays_finite():
    p = Tensor([0.5, 0.5], dtype=np.float64)
    q = Tensor([1.0, 0.0], dtype=np.float64)
    assert math.isfinite(kl_divergence(p, q).item())


# -- elementwise / structural ---------------------------------------------------


def test_gelu_at_zero():
    assert gelu(Tensor([0.0])).item() == 0.0


def test_gelu_grad_matches_fd():
    rng = np.random.default_rng(10)
    x = param(rng, 3, 3)
    report = grad_check(lambda: tsum(gelu(x)), {"x": x})
    assert report.passed, report


def test_concat_slice_roundtrip():
    a = Tensor([[1.0, 2.0]])
    b = Tensor([[3.0, 4.0]])
    cat = concat([a, b], axis=0)
    np.testing.assert_array_equal(narrow(cat, 0, 0, 1).data, a.data)
    np.testing.assert_array_equal(narrow(cat, 0, 1, 2).data, b.data)


@pytest.mark.parametrize(
    "build",
    [
        lambda x, w: tsum(x + w),
        lambda x, w: tsum(x * w),
        lambda x, w: tsum(x - w),
        lambda x, w: tsum(transpose(x, (1, 0)) * transpose(w, (1, 0))),
        lambda x, w: tsum(x.reshape(6) * w.reshape(6)),
        lambda x, w: tsum(concat([x, w], axis=0)),
        lambda x, w: tsum(narrow(x, 1, 1, 3) * narrow(w, 1, 0, 2)),
        lambda x, w: tmean(x * w),
        lambda x, w: tsum(tsum(x, axis=0) * tsum(w, axis=0)),
        lambda x, w: tsum(stack([x.select(0, 0), w.select(0, 1)], axis=0)),
    ],
    ids=["add", "mul", "sub", "transpose", "reshape", "concat", "narrow", "mean", "axis-sum", "stack-select"],
)
def test_structural_ops_grad_matches_fd(build):
    rng = np.random.default_rng(11)
    x = param(rng, 2, 3)
    w = param(rng, 2, 3)
    report = grad_check(lambda: build(x, w), {"x": x, "w": w})
    assert report.passed, report


def test_broadcast_add_grad():
    rng = np.random.default_rng(12)
    x = param(rng, 4, 3)
    b = param(rng, 3)
    report = grad_check(lambda: tsum(x + b), {"x": x, "b": b})
    assert report.passed, report


def test_double_consumption_accumulates():
    x = Tensor([2.0, 3.0], requires_grad=True, dtype=np.float64)
    y = tsum(x * x) + tsum(x * 4.0)
    y.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 4.0)


def test_no_grad_suppresses_graph():
    x = Tensor([1.0], requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad and y._backward is None


# -- grad_check behavior ----------------------------------------------------------


def test_grad_check_linear_is_exact():
    rng = np.random.default_rng(13)
    w = param(rng, 5)
    c = Tensor(rng.standard_normal(5), dtype=np.float64)
    report = grad_check(lambda: tsum(w * c), {"w": w}, tol=1e-8)
    assert report.passed and report.max_rel_err < 1e-8


def test_grad_check_flags_corrupted_backward():
    def bad_double(t):
        data = t.data * 2.0

        def make(out):
            def run():
                t._accumulate(out.grad * 3.0)  # wrong rule on purpose

            return run

        return _from_op(data, (t,), make)

    rng = np.random.default_rng(14)
    w = param(rng, 4)
    report = grad_check(lambda: tsum(bad_double(w)), {"w": w})
    assert not report.passed and report.max_rel_err > 1e-2


def test_nonfinite_raises():
    with pytest.raises(NonFiniteError):
        Tensor([np.inf])
    big = Tensor([1e300], dtype=np.float64)
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        big * 1e300
