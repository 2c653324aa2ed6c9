import math

import mpmath
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dualpath_vlm import tensor as T
from dualpath_vlm.errors import ContractError, DegenerateBatchError, ShapeError
from dualpath_vlm.tensor import Tensor, no_grad

from conftest import numeric_grad, rel_err

finite = st.floats(-3, 3, allow_nan=False, allow_infinity=False)


def check_grads(build, *arrays_, h=1e-5, tol=1e-6):
    """Compare autodiff of ``sum(w * build(*tensors))`` against central differences."""
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays_]
    out = build(*tensors)
    w = np.random.default_rng(0).normal(size=out.shape)
    T.backward(T.tsum(out * Tensor(w)))
    for t in tensors:
        def f():
            with no_grad():
                return float((build(*[Tensor(s.data) for s in tensors]).data * w).sum())

        num = numeric_grad(f, t.data, h)
        assert rel_err(t.grad, num) < tol


# -- matmul -------------------------------------------------------------------
def test_matmul_identity():
    a = Tensor(np.array([[1.0, 2], [3, 4]]))
    np.testing.assert_array_equal((Tensor(np.eye(2)) @ a).data, a.data)


def test_matmul_row_times_column():
    assert (Tensor([[1.0, 2]]) @ Tensor([[3.0], [4]])).data.tolist() == [[11.0]]


def test_matmul_gradients_match_finite_differences(rng):
    check_grads(lambda a, b: a @ b, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), h=1e-5, tol=1e-6)


def test_batched_matmul_gradients(rng):
    check_grads(lambda a, b: a @ b, rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5)))
    check_grads(lambda a, b: a @ b, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 2\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 2)))


# -- softmax ------------------------------------------------------------------
def test_softmax_uniform():
    np.testing.assert_allclose(T.softmax(Tensor(np.zeros(4))).data, [0.25] * 4, atol=0)


def test_softmax_large_inputs_do_not_overflow():
    np.testing.assert_array_equal(T.softmax(Tensor([1000.0, 1000.0])).data, [0.5, 0.5])


def test_softmax_matches_extended_precision():
    mpmath.mp.dps = 50
    xs = [1, 2, 3]
    z = sum(mpmath.exp(x) for x in xs)
    ref = [float(mpmath.exp(x) / z) for x in xs]
    np.testing.assert_allclose(T.softmax(Tensor(np.array(xs, float))).data, ref, rtol=0, atol=1e-12)


def test_softmax_bad_axis():
    with pytest.raises(IndexError):
        T.softmax(Tensor(np.zeros((2, 3))), axis=2)


@given(arrays(np.float64, (3, 5), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(x):
    s = T.softmax(Tensor(x), axis=-1).data.sum(axis=-1)
    assert np.all(np.abs(s - 1) < 1e-12)


def test_softmax_gradient(rng):
    check_grads(lambda x: T.softmax(x, axis=1), rng.normal(size=(2, 4, 3)))


# -- layer norm ---------------------------------------------------------------
def test_layer_norm_constant_slice():
    out = T.layer_norm(Tensor([5.0, 5, 5]), Tensor(np.ones(3)), Tensor(np.zeros(3)), 1e-5)
    np.testing.assert_allclose(out.data, 0, atol=1e-12)


def test_layer_norm_gamma_zero_gives_beta(rng):
    out = T.layer_norm(Tensor(rng.normal(size=(4, 6))), Tensor(np.zeros(6)), Tensor(np.full(6, 7.0)))
    np.testing.assert_array_equal(out.data, 7.0)


def test_layer_norm_scalar_oracle():
    xs, eps = [1.0, 2.0, 3.0], 1e-5
    mu = sum(xs) / 3
    var = sum((x - mu) ** 2 for x in xs) / 3
    ref = [(x - mu) / math.sqrt(var + eps) for x in xs]
    out = T.layer_norm(Tensor(xs), Tensor(np.ones(3)), Tensor(np.zeros(3)), eps)
    np.testing.assert_allclose(out.data, ref, atol=1e-10, rtol=0)


@given(arrays(np.float64, (2, 7), elements=st.floats(-100, 100)).filter(lambda a: np.all(a.std(axis=1) > 1e-2)))
def test_layer_norm_normalizes(x):
    out = T.layer_norm(Tensor(x), Tensor(np.ones(7)), Tensor(np.zeros(7)), 1e-5).data
    assert np.all(np.abs(out.mean(axis=1)) < 1e-10)
    assert np.all(np.abs(out.var(axis=1) - 1) < 1e-6 + 1e-5 / x.var(axis=1))


def test_layer_norm_gradients(rng):
    check_grads(lambda x, g, b: T.layer_norm(x, g, b), rng.normal(size=(3, 5)), rng.normal(size=5),
                rng.normal(size=5))


def test_layer_norm_shape_mismatch():
    with pytest.raises(ShapeError):
        T.layer_norm(Tensor(np.zeros((2, 4))), Tensor(np.ones(3)), Tensor(np.zeros(3)))


# -- gelu ---------------------------------------------------------------------
def test_gelu_values():
    assert T.gelu(Tensor([0.0])).data[0] == 0.0
    assert abs(T.gelu(Tensor([100.0])).data[0] - 100.0) < 1e-6
    c = math.sqrt(2 / math.pi)
    ref = 0.5 * (1 + math.tanh(c * (1 + 0.044715)))
    assert abs(T.gelu(Tensor([1.0])).data[0] - ref) < 1e-12


def _gelu_argmin() -> float:
    mpmath.mp.dps = 30
    c = mpmath.sqrt(2 / mpmath.pi)
    f = lambda x: 0.5 * x * (1 + mpmath.tanh(c * (x + 0.044715 * x**3)))  # noqa: E731
    return float(mpmath.findroot(lambda x: mpmath.diff(f, x), -0.75))


def test_gelu_monotone_either_side_of_minimum():
    # tanh-GELU dips to its minimum near -0.75, so it is decreasing on [-1, x*] and increasing after
    x_star = _gelu_argmin()
    assert -0.76 < x_star < -0.74
    left = T.gelu(Tensor(np.linspace(-1, x_star - 1e-6, 500))).data
    right = T.gelu(Tensor(np.linspace(x_star + 1e-6, 20, 2000))).data
    assert np.all(np.diff(left) < 0) and np.all(np.diff(right) > 0)


def test_gelu_gradient(rng):
    check_grads(T.gelu, rng.normal(size=(4, 3)) * 2)


# -- cross entropy ------------------------------------------------------------
def test_cross_entropy_uniform():
    loss = T.cross_entropy(Tensor(np.zeros((3, 256))), np.array([0, 5, 255]))
    assert abs(loss.item() - math.log(256)) < 1e-12


def test_cross_entropy_confident():
    logits = np.zeros((2, 5))
    logits[0, 3] = logits[1, 1] = 1e9
    assert T.cross_entropy(Tensor(logits), np.array([3, 1])).item() < 1e-9


def test_cross_entropy_scalar_oracle(rng):
    logits = rng.normal(size=(4, 7))
    tgt = np.array([0, 6, 3, -100])
    ref = []
    for row, t in zip(logits, tgt):
        if t == -100:
            continue
        ref.append(math.log(sum(math.exp(v) for v in row)) - row[t])
    assert abs(T.cross_entropy(Tensor(logits), tgt).item() - sum(ref) / len(ref)) < 1e-10


def test_cross_entropy_errors():
    with pytest.raises(DegenerateBatchError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([-100, -100]))
    with pytest.raises(IndexError):
        T.cross_entropy(Tensor(np.zeros((2, 3))), np.array([1, 3]))


def test_cross_entropy_gradient(rng):
    tgt = np.array([[1, -100, 4], [0, 2, -100]])
    check_grads(lambda x: T.cross_entropy(x, tgt), rng.normal(size=(2, 3, 5)))


# -- structural ops -----------------------------------------------------------
def test_structural_gradients(rng):
    x = rng.normal(size=(2, 3, 4))
    check_grads(lambda a: T.reshape(a, (6, 4)), x)
    check_grads(lambda a: T.transpose(a, (2, 0, 1)), x)
    check_grads(lambda a: a[:, 1:], x)
    check_grads(lambda a: a[np.array([0, 0, 1])], x)
    check_grads(lambda a: T.repeat_axis(a, 3, 1), x)
    check_grads(lambda a, b: T.concat([a, b], axis=1), x, rng.normal(size=(2, 2, 4)))
    check_grads(lambda w: T.embedding(w, np.array([[0, 2, 2], [1, 0, 4]])), rng.normal(size=(5, 3)))
    check_grads(lambda a: T.masked_fill(a, np.array([True, False, True, False]), -7.0), x)
    check_grads(lambda a, b: a * b + b, x, rng.normal(size=(4,)))
    check_grads(lambda a: T.tmean(a) * a - a, x)


def test_repeat_axis_matches_numpy(rng):
    x = rng.normal(size=(2, 3, 4))
    np.testing.assert_array_equal(T.repeat_axis(Tensor(x), 2, 1).data, np.repeat(x, 2, axis=1))


def test_broadcast_is_suffix_only():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 1)))


# -- backward -----------------------------------------------------------------
@given(st.lists(finite, min_size=1, max_size=6))
def test_sum_gradient_is_ones(xs):
    x = Tensor(np.array(xs), requires_grad=True)
    T.backward(T.tsum(x))
    np.testing.assert_array_equal(x.grad, np.ones(len(xs)))


def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    T.backward(x * x)
    assert x.grad == 6.0


def test_backward_accumulates_until_reset():
    x = Tensor(np.array([1.0, 2.0]), requires_grad=True)
    T.backward(T.tsum(x * x))
    T.backward(T.tsum(x * x))
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    with pytest.raises(ContractError):
        T.backward(Tensor(np.ones(2), requires_grad=True) * 2.0)


def test_no_grad_tensor_never_gets_buffer():
    a = Tensor(np.ones(3))
    b = Tensor(np.ones(3), requires_grad=True)
    T.backward(T.tsum(a * b))
    assert a.grad is None and b.grad is not None


def test_no_grad_context_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = x * 2.0
    assert not y.requires_grad


def test_shared_subexpression_accumulates(rng):
    check_grads(lambda a: (a @ T.transpose(a, (1, 0))) * T.gelu(a @ T.transpose(a, (1, 0))), rng.normal(size=(3, 3)))
