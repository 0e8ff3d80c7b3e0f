import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elasticrec import tensor as T
from elasticrec.errors import ContractError, DimensionError, NonFiniteError

from _oracles import gradcheck, numeric_grad, max_rel_error


def test_matmul_identity():
    out = T.matmul(T.tensor([[1.0, 0.0], [0.0, 1.0]]), T.tensor([[3.0, 4.0], [5.0, 6.0]]))
    np.testing.assert_array_equal(out.data, [[3, 4], [5, 6]])


def test_matmul_dot():
    out = T.tensor([[1.0, 2.0]]) @ T.tensor([[3.0], [4.0]])
    assert out.data.tolist() == [[11.0]]


def test_matmul_shape_error_mentions_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
        T.matmul(T.tensor(np.ones((2, 3))), T.tensor(np.ones((2, 3))))


def test_matmul_grad_vs_finite_differences():
    rng = np.random.default_rng(0)
    a = T.parameter(rng.normal(size=(3, 4)), name="a")
    b = T.tensor(rng.normal(size=(4, 2)))
    errs = gradcheck(lambda: T.sum(a @ b), [a])
    assert errs["a"] < 1e-6


def test_matmul_flops():
    T.reset_flops()
    T.matmul(T.tensor(np.ones((3, 4))), T.tensor(np.ones((4, 5))))
    assert T.flop_count() == 2 * 3 * 4 * 5


def test_batched_matmul_broadcasts_weight_and_reduces_grad():
    rng = np.random.default_rng(1)
    x = T.tensor(rng.normal(size=(2, 3, 4)))
    w = T.parameter(rng.normal(size=(4, 5)), name="w")
    errs = gradcheck(lambda: T.sum(T.mul(x @ w, x @ w)), [w])
    assert errs["w"] < 1e-6


def test_softmax_uniform_and_stable():
    np.testing.assert_allclose(T.softmax(T.tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3])
    s = T.softmax(T.tensor([[1000.0, 0.0]])).data
    assert s[0, 0] == pytest.approx(1.0) and s[0, 1] == pytest.approx(0.0)


def test_softmax_jacobian():
    rng = np.random.default_rng(2)
    x = T.parameter(rng.normal(size=(2, 5)), name="x")
    w = T.tensor(rng.normal(size=(2, 5)))
    assert gradcheck(lambda: T.sum(T.mul(T.softmax(x), w)), [x])["x"] < 1e-5


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12), st.integers(1, 4))
def test_softmax_rows_sum_to_one(values, rows):
    x = np.tile(np.array(values), (rows, 1))
    s = T.softmax(T.tensor(x)).data
    assert (s >= 0).all()
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-9)


def test_add_and_reshape():
    assert T.add(T.tensor([[1.0, 2.0]]), T.tensor([[3.0, 4.0]])).data.tolist() == [[4.0, 6.0]]
    x = np.arange(12.0).reshape(2, 6)
    np.testing.assert_array_equal(T.reshape(T.tensor(x), (3, 4)).data.ravel(), np.arange(12.0))


def test_mean_gradient_is_uniform():
    x = T.parameter(np.arange(10.0))
    T.backward(T.mean(x))
    np.testing.assert_allclose(x.grad, 0.1)


def test_broadcast_mismatch():
    with pytest.raises(DimensionError):
        T.add(T.tensor(np.ones((2, 3))), T.tensor(np.ones((4,))))


def test_backward_linear_map():
    w = T.parameter(np.zeros((2, 3)))
    x = np.array([[1.0], [2.0], [3.0]])
    T.backward(T.sum(w @ T.tensor(x)))
    np.testing.assert_array_equal(w.grad, np.tile(x.T, (2, 1)))


def test_backward_requires_scalar():
    x = T.parameter(np.ones((2, 2)))
    with pytest.raises(ContractError):
        T.backward(T.scale(x, 2.0))
    T.clear_tape()


def test_backward_requires_tape_connection():
    with pytest.raises(ContractError):
        T.backward(T.tensor(1.0))


def test_detached_tensor_gets_no_grad():
    x = T.parameter(np.ones(3))
    c = x.detach()
    T.backward(T.sum(T.mul(x, c)))
    assert c.grad is None
    np.testing.assert_array_equal(x.grad, 1.0)


def test_tape_cleared_after_backward():
    x = T.parameter(np.ones(3))
    T.backward(T.sum(T.scale(x, 3.0)))
    assert T.tape_size() == 0


def test_no_grad_records_nothing():
    x = T.parameter(np.ones(3))
    with T.no_grad():
        y = T.scale(x, 2.0)
    assert not y.requires_grad and T.tape_size() == 0


def test_non_finite_is_reported():
    with pytest.raises(NonFiniteError):
        T.exp(T.tensor([1000.0]))
    with pytest.raises(NonFiniteError):
        T.tensor([np.nan])


@pytest.mark.parametrize("op", [
    lambda x: T.gelu(x),
    lambda x: T.relu(x),
    lambda x: T.exp(T.scale(x, 0.3)),
    lambda x: T.log(T.add(T.mul(x, x), 1.0)),
    lambda x: T.transpose(x),
    lambda x: T.concat([x, T.scale(x, 2.0)], axis=1),
    lambda x: T.index(x, (slice(None), np.array([0, 2, 2]))),
    lambda x: T.sum(x, axis=0, keepdims=True),
    lambda x: T.mean(x, axis=1),
    lambda x: T.masked_fill(x, np.array([[True, False, False, True]] * 3), -5.0),
    lambda x: T.layer_norm(x, T.tensor([1.0, 2.0, 0.5, 1.5]), T.tensor([0.1, 0.0, -0.2, 0.3])),
])
def test_elementwise_gradients(op):
    rng = np.random.default_rng(3)
    x = T.parameter(rng.normal(size=(3, 4)), name="x")
    w = T.tensor(rng.normal(size=op(T.tensor(x.data)).shape))
    assert gradcheck(lambda: T.sum(T.mul(op(x), w)), [x])["x"] < 1e-5


def test_layer_norm_affine_gradients():
    rng = np.random.default_rng(4)
    x = T.tensor(rng.normal(size=(5, 4)))
    g = T.parameter(rng.normal(size=4), name="g")
    b = T.parameter(rng.normal(size=4), name="b")
    w = T.tensor(rng.normal(size=(5, 4)))
    errs = gradcheck(lambda: T.sum(T.mul(T.layer_norm(x, g, b), w)), [g, b])
    assert max(errs.values()) < 1e-6


def test_cross_entropy_uniform_and_gradient():
    logits = T.parameter(np.zeros((1, 100)))
    out = T.cross_entropy(logits, [7])
    assert out.item() == pytest.approx(np.log(100))
    T.backward(out)
    expected = np.full((1, 100), 0.01)
    expected[0, 7] -= 1
    np.testing.assert_allclose(logits.grad, expected)


def test_cross_entropy_gradient_fd():
    rng = np.random.default_rng(5)
    logits = T.parameter(rng.normal(size=(3, 6)), name="logits")
    assert gradcheck(lambda: T.cross_entropy(logits, [0, 5, 2]), [logits])["logits"] < 1e-6


def test_flop_counter_deterministic():
    rng = np.random.default_rng(6)
    a, b = T.tensor(rng.normal(size=(4, 4))), T.tensor(rng.normal(size=(4, 4)))

    def graph():
        return T.softmax(T.gelu(a @ b) + a)

    with T.count_flops() as c1:
        graph()
    with T.count_flops() as c2:
        graph()
    assert c1.flops == c2.flops == 2 * 64 + 16 + 16 + 5 * 16


def test_memory_tracker_peak():
    with T.track_memory() as mem:
        a = T.tensor(np.ones((10, 10)))
        b = T.scale(a, 2.0)
        del a, b
        c = T.tensor(np.ones(5))
    assert mem.peak == 2 * 800
    assert mem.current == c.data.nbytes


def test_seeded_init_bit_identical():
    a = T.normal_init((5, 3), 123, "w")
    b = T.normal_init((5, 3), 123, "w")
    c = T.normal_init((5, 3), 123, "other")
    assert np.array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_numeric_grad_helper_on_quadratic():
    x = T.parameter(np.array([1.0, -2.0, 3.0]))
    n = numeric_grad(lambda: T.sum(T.mul(x, x)), x)
    assert max_rel_error(2 * x.data, n) < 1e-8
