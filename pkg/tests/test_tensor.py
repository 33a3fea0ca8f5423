import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from perceiver_ts import tensor as T
from perceiver_ts.errors import ContractError, DimensionError, NumericError
from perceiver_ts.gradcheck import numerical_grad, rel_error
from perceiver_ts.tensor import Tensor


def check_op_grad(build, *arrays, tol=1e-4):
    """Compare backward() against central differences for a scalar-valued graph."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    T.backward(build(*ts))
    for t in ts:
        def f():
            with T.no_grad():
                return build(*ts).item()
        assert rel_error(t.grad, numerical_grad(f, t.data)) < tol


finite = st.floats(-2, 2, allow_nan=False)


# -- matmul ---------------------------------------------------------------------

def test_matmul_identity():
    a = np.array([[1.0, 2], [3, 4]])
    np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), Tensor(a)).data, a)


def test_matmul_unit_basis():
    assert T.matmul(Tensor([[1.0, 0]]), Tensor([[2.0], [5]])).data.tolist() == [[2.0]]


def test_matmul_grad_sum_example():
    a = Tensor([[1.0, 1.0]], requires_grad=True)
    b = Tensor([[3.0], [4.0]])
    T.backward(T.sum_all(T.matmul(a, b)))
    np.testing.assert_allclose(a.grad, [[3.0, 4.0]])
    num = numerical_grad(lambda: float((a.data @ b.data).sum()), a.data)
    np.testing.assert_allclose(num, [[3.0, 4.0]], rtol=1e-8)


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (3, 4), elements=finite), hnp.arrays(np.float64, (4, 2), elements=finite))
def test_matmul_grad_matches_fd(a, b):
    check_op_grad(lambda x, y: T.sum_all(T.mul(T.matmul(x, y), T.matmul(x, y))), a, b)


def test_batched_matmul_with_shared_weight_grad():
    rng = np.random.default_rng(0)
    check_op_grad(lambda x, w: T.mean_all(T.gelu(x @ w)), rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))


# -- softmax ----------------------------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(T.softmax_rows(Tensor([[1000.0, 1000, 1000]])).data, [[1 / 3] * 3])
    np.testing.assert_allclose(T.softmax_rows(Tensor([[0.0, math.log(3)]])).data, [[0.25, 0.75]])


def test_softmax_nan_raises():
    with pytest.raises(NumericError):
        T.softmax_rows(Tensor([[0.0, np.nan]]))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_sum_to_one_and_shift_invariant(x, c):
    s = T.softmax_rows(Tensor(x)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(T.softmax_rows(Tensor(x + c)).data, s, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (2, 4), elements=finite), hnp.arrays(np.float64, (2, 4), elements=finite))
def test_softmax_grad_matches_fd(x, w):
    check_op_grad(lambda a: T.sum_all(T.mul(T.softmax_rows(a), Tensor(w))), x)


# -- layer norm ---------------------------------------------------------------------

def test_layer_norm_constant_row_is_zero():
    out = T.layer_norm(Tensor([[1.0, 1, 1]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, [[0.0, 0, 0]], atol=1e-12)


def test_layer_norm_standardized_row_is_eps_perturbed():
    out = T.layer_norm(Tensor([[-1.0, 1]]), Tensor(np.ones(2)), Tensor(np.zeros(2))).data
    np.testing.assert_allclose(out, [[-1 / math.sqrt(1 + 1e-5), 1 / math.sqrt(1 + 1e-5)]], rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (3, 5), elements=finite), hnp.arrays(np.float64, 5, elements=finite),
       hnp.arrays(np.float64, 5, elements=finite))
def test_layer_norm_grad_matches_fd(x, g, b):
    w = np.linspace(-1, 1, 15).reshape(3, 5)
    check_op_grad(lambda a, gg, bb: T.sum_all(T.mul(T.layer_norm(a, gg, bb), Tensor(w))), x + np.arange(5), g, b)


# -- elementwise ----------------------------------------------------------------------

def test_elementwise_examples():
    x = Tensor(np.array([1.0, -2.0, 3.0]))
    assert T.mse(x, x).item() == 0.0
    assert T.mse(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 1.0
    assert T.gelu(Tensor([0.0])).data[0] == 0.0


def test_gelu_tanh_form():
    x = np.array([-1.5, 0.3, 2.0])
    ref = 0.5 * x * (1 + np.tanh(math.sqrt(2 / math.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(T.gelu(Tensor(x)).data, ref, rtol=1e-14)


def test_mse_shape_mismatch():
    with pytest.raises(DimensionError):
        T.mse(Tensor(np.ones(3)), Tensor(np.ones(4)))


def test_add_incompatible_shapes():
    with pytest.raises(DimensionError):
        T.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))))


@settings(max_examples=25, deadline=None)
@given(hnp.arrays(np.float64, (2, 3), elements=finite), hnp.arrays(np.float64, (2, 3), elements=finite),
       st.floats(-3, 3))
def test_elementwise_grads_match_fd(a, b, c):
    check_op_grad(lambda x, y: T.mean_all(T.gelu(T.scale(T.add(x, T.mul(x, y)), c) - y)), a, b)
    check_op_grad(lambda x, y: T.mse(x, y), a, b)


def test_broadcast_bias_grad_sums_over_rows():
    rng = np.random.default_rng(1)
    check_op_grad(lambda x, b: T.sum_all(T.gelu(x + b)), rng.normal(size=(4, 3)), rng.normal(size=3))


# -- backward -----------------------------------------------------------------------

def test_backward_square_sum():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    T.backward(T.sum_all(T.mul(x, x)))
    np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])


def test_unused_parameter_grad_is_zero_or_absent():
    x = Tensor([1.0, 2.0], requires_grad=True)
    p = Tensor([5.0], requires_grad=True)
    T.backward(T.sum_all(x))
    assert p.grad is None or not p.grad.any()


def test_backward_non_scalar_raises():
    with pytest.raises(ContractError):
        T.backward(Tensor(np.ones(3), requires_grad=True) * 2.0)


def test_backward_twice_doubles_exactly():
    rng = np.random.default_rng(2)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w = Tensor(rng.normal(size=(4, 2)), requires_grad=True)
    loss = T.mean_all(T.softmax_rows(x @ w))
    T.backward(loss)
    g1 = x.grad.copy(), w.grad.copy()
    T.backward(loss)
    np.testing.assert_array_equal(x.grad, 2 * g1[0])
    np.testing.assert_array_equal(w.grad, 2 * g1[1])


def test_no_grad_builds_no_graph():
    x = Tensor([1.0], requires_grad=True)
    with T.no_grad():
        y = x * 3.0
    assert not y.requires_grad
    assert T.grad_enabled()


def test_ops_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 4))
    r1 = T.layer_norm(T.gelu(Tensor(a) @ Tensor(b)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    r2 = T.layer_norm(T.gelu(Tensor(a) @ Tensor(b)), Tensor(np.ones(4)), Tensor(np.zeros(4))).data
    np.testing.assert_array_equal(r1, r2)


# -- gather -------------------------------------------------------------------------

def test_gather_identity_and_order():
    a = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(T.gather_rows(Tensor(a), [0, 1, 2]).data, a)
    np.testing.assert_array_equal(T.gather_rows(Tensor([[1.0], [2.0], [3.0]]), [2, 0]).data, [[3.0], [1.0]])


def test_gather_duplicate_index_doubles_grad():
    a = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]), requires_grad=True)
    T.backward(T.sum_all(T.gather_rows(a, [1, 1])))
    np.testing.assert_array_equal(a.grad, [[0.0, 0.0], [2.0, 2.0]])
    num = numerical_grad(lambda: float(a.data[[1, 1]].sum()), a.data)
    np.testing.assert_allclose(num, a.grad, rtol=1e-8)


def test_gather_out_of_range_names_index():
    with pytest.raises(IndexError, match="7"):
        T.gather_rows(Tensor(np.ones((3, 2))), [0, 7])


def test_layout_ops_grad():
    rng = np.random.default_rng(4)
    w = rng.normal(size=(2, 6))
    check_op_grad(lambda x: T.sum_all(T.mul(T.reshape(T.transpose(x, (1, 0, 2)), (2, 6)), Tensor(w))),
                  rng.normal(size=(3, 2, 2)))
    check_op_grad(lambda x: T.mean_all(T.gelu(T.broadcast_to(x, (4, 3)))), rng.normal(size=(1, 3)))
