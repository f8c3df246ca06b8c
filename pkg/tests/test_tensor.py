import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sen2lcz import layers as L
from sen2lcz.tensor import (Graph, GraphError, NonDeterministicError, ShapeError, Tensor, backward, concat,
                            elementwise, finite_difference_check, log, matmul, mean, no_grad, relu)

F64 = np.float64


def leaf(values, dtype=F64):
    return Tensor(np.asarray(values, dtype=dtype), requires_grad=True)


# -- elementwise ---------------------------------------------------------------


def test_add_values():
    out = elementwise("add", Tensor([1.0, 2.0]), Tensor([3.0, 4.0]))
    np.testing.assert_array_equal(out.data, [4.0, 6.0])


def test_relu_values():
    np.testing.assert_array_equal(relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])


def test_mul_gradient_product_rule():
    a, b = leaf([2.0]), leaf([5.0])
    elementwise("mul", a, b).sum().backward()
    np.testing.assert_array_equal(a.grad, [5.0])
    np.testing.assert_array_equal(b.grad, [2.0])


def test_scalar_broadcast_and_scale():
    a = leaf([1.0, -2.0])
    out = elementwise("scale", a, 3.0) + 1.0
    np.testing.assert_array_equal(out.data, [4.0, -5.0])
    out.sum().backward()
    np.testing.assert_array_equal(a.grad, [3.0, 3.0])


def test_shape_mismatch_is_descriptive():
    with pytest.raises(ShapeError, match=r"\(2,\).*\(3,\)"):
        elementwise("add", Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_unknown_kind():
    with pytest.raises(ValueError):
        elementwise("div", Tensor([1.0]), Tensor([1.0]))


def test_default_dtype_is_float32():
    assert Tensor([1, 2, 3]).dtype == np.float32
    assert Tensor(np.zeros(2, dtype=F64)).dtype == F64


# -- matmul ----------------------------------------------------------------


def test_matmul_identity():
    m = np.array([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(matmul(Tensor(np.eye(2)), Tensor(m)).data, m)


def test_matmul_values():
    np.testing.assert_array_equal(matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_gradient_formulas():
    rng = np.random.default_rng(0)
    a, b = leaf(rng.normal(size=(3, 4))), leaf(rng.normal(size=(4, 2)))
    g = rng.normal(size=(3, 2))
    (matmul(a, b) * Tensor(g)).sum().backward()
    np.testing.assert_allclose(a.grad, g @ b.data.T, rtol=1e-12)
    np.testing.assert_allclose(b.grad, a.data.T @ g, rtol=1e-12)


def test_matmul_finite_difference():
    rng = np.random.default_rng(1)
    a, b = Tensor(rng.normal(size=(3, 4))), Tensor(rng.normal(size=(4, 2)))
    r = Tensor(rng.normal(size=(3, 2)))
    assert finite_difference_check(lambda t: (matmul(t, b) * r).sum(), a, extra=[b]) < 1e-6


def test_matmul_dimension_mismatch():
    with pytest.raises(ShapeError):
        matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


# -- backward ----------------------------------------------------------------


def test_backward_sum_gives_ones():
    x = leaf([1.0, 2.0, 3.0])
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])


def test_backward_power_rule():
    x = leaf([1.0, 2.0])
    (x * x).sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 4.0])


def test_fan_out_accumulates():
    rng = np.random.default_rng(2)
    v = rng.normal(size=5)
    x = leaf(v)
    ((x * x).sum() + elementwise("scale", x, 3.0).sum()).backward()
    np.testing.assert_allclose(x.grad, 2 * v + 3.0, rtol=1e-12)


def test_leaf_grads_accumulate_across_calls():
    x = leaf([1.0, 2.0])
    x.sum().backward()
    x.sum().backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])
    x.zero_grad()
    assert x.grad is None


def test_nonscalar_loss_rejected():
    x = leaf([1.0, 2.0])
    with pytest.raises(GraphError, match="scalar"):
        (x * x).backward()


def test_graph_mismatch_rejected():
    x = leaf([1.0, 2.0])
    g = Graph(x.sum())
    with pytest.raises(GraphError):
        backward(g, (x * x).sum())


def test_graph_is_topological():
    x = leaf([1.0, 2.0])
    y = (x * x + x).sum()
    g = Graph(y)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    for n in g.nodes:
        for p in n._parents:
            assert pos[id(p)] < pos[id(n)]
    assert g.leaves() == [x]


def test_released_graph_cannot_be_replayed():
    x = leaf([1.0, 2.0])
    y = (x * x).sum()
    y.backward()
    with pytest.raises(GraphError):
        y.backward()


def test_retain_graph_allows_second_pass():
    x = leaf([1.0, 2.0])
    y = (x * x).sum()
    y.backward(retain_graph=True)
    y.backward()
    np.testing.assert_array_equal(x.grad, [4.0, 8.0])


def test_no_grad_builds_no_graph():
    x = leaf([1.0, 2.0])
    with no_grad():
        y = (x * x).sum()
    assert not y.requires_grad
    with pytest.raises(GraphError):
        y.backward()


def test_assert_finite():
    with pytest.raises(FloatingPointError):
        Tensor([1.0, np.nan]).assert_finite()


def test_log_mean_concat_gradients():
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(0.5, 2.0, size=(2, 3)))
    y = Tensor(rng.normal(size=(2, 2)))
    r = Tensor(rng.normal(size=(2, 5)))
    fn = lambda t: mean(concat([log(t), y], axis=1) * r)
    assert finite_difference_check(fn, x, extra=[y]) < 1e-6


def test_deep_chain_no_recursion_limit():
    x = leaf([1.0])
    y = x
    for _ in range(5000):
        y = y + 0.0
    y.sum().backward()
    np.testing.assert_array_equal(x.grad, [1.0])


# -- finite differences ----------------------------------------------------------


_away = st.floats(0.01, 10) | st.floats(-10, -0.01)


@settings(max_examples=25, deadline=None)
@given(arrays(F64, st.integers(1, 6), elements=_away))
def test_fd_exact_quadratic(values):
    # central differences are exact for a quadratic, so only roundoff remains;
    # eps=1e-3 keeps that below 1e-8 for |f| <= 600 and |grad| >= 0.02
    assert finite_difference_check(lambda t: (t * t).sum(), Tensor(values), eps=1e-3) < 1e-8


def test_fd_softmax_cross_entropy():
    rng = np.random.default_rng(4)
    x = Tensor(rng.normal(size=(5, 17)))
    y = L.one_hot(rng.integers(1, 18, size=5), 17, F64)
    assert finite_difference_check(lambda t: L.softmax_cross_entropy(t, y, "logits"), x) < 1e-6


def test_fd_flags_dropout_as_nondeterministic():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(size=100))
    with pytest.raises(NonDeterministicError):
        finite_difference_check(lambda t: L.dropout(t, 0.5, "train", rng).sum(), x)


def test_fd_detects_wrong_gradient():
    from sen2lcz.tensor import make_node

    def bad_square(t):
        return make_node(t.data ** 2, [t], lambda g: (g * t.data,), "bad_square")

    x = Tensor(np.array([1.0, 2.0, 3.0]))
    assert finite_difference_check(lambda t: bad_square(t).sum(), x) > 0.4


def test_fd_rejects_bad_eps():
    with pytest.raises(ValueError):
        finite_difference_check(lambda t: t.sum(), Tensor([1.0]), eps=0.0)


def test_fd_leaves_grads_clean():
    a, b = Tensor(np.array([1.0, 2.0])), Tensor(np.array([3.0, 4.0]))
    finite_difference_check(lambda t: (t * b).sum(), a, extra=[b])
    assert a.grad is None and b.grad is None


def test_fd_kink_skipping_reports_counts():
    # relu at exactly 0 sits on its kink: skipped rather than compared
    x = Tensor(np.array([0.0, 1.0, -1.0]))
    info = {}
    err = finite_difference_check(lambda t: relu(t).sum(), x, skip_kinks=True, info=info)
    assert info == {"checked": 2, "skipped": 1}
    assert err < 1e-8


def test_forward_bitwise_deterministic():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(8, 8)).astype(np.float32), rng.normal(size=(8, 8)).astype(np.float32)
    r1 = relu(matmul(Tensor(a), Tensor(b)) + Tensor(a)).data
    r2 = relu(matmul(Tensor(a), Tensor(b)) + Tensor(a)).data
    assert r1.tobytes() == r2.tobytes()


def test_single_precision_gradients_within_1e_4():
    # float32 analytic gradients against a float64 central-difference oracle
    rng = np.random.default_rng(7)
    a64, b64, r64 = rng.normal(size=(4, 3)), rng.normal(size=(3, 2)), rng.normal(size=(4, 2))

    def fn(a, b, r):
        return (relu(matmul(a, b)) * r).sum()

    a32 = leaf(a64, np.float32)
    fn(a32, Tensor(b64.astype(np.float32)), Tensor(r64.astype(np.float32))).backward()
    eps = 1e-6
    numeric = np.zeros_like(a64)
    for i in np.ndindex(a64.shape):
        hi, lo = a64.copy(), a64.copy()
        hi[i] += eps
        lo[i] -= eps
        numeric[i] = (fn(Tensor(hi), Tensor(b64), Tensor(r64)).item()
                      - fn(Tensor(lo), Tensor(b64), Tensor(r64)).item()) / (2 * eps)
    rel = np.abs(a32.grad - numeric) / np.maximum(np.maximum(np.abs(a32.grad), np.abs(numeric)), 1e-3)
    assert rel.max() < 1e-4
