import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pepscreen import tensor as T
from pepscreen.nn import scaled_dot_attention
from pepscreen.tensor import MaskError, ShapeError, Tensor


def leaf(rng, *shape):
    return Tensor(rng.standard_normal(shape), requires_grad=True)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------- forward examples

def test_softmax_uniform():
    out = T.softmax(Tensor([0.0, 0.0, 0.0])).values
    np.testing.assert_allclose(out, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_sigmoid_zero():
    assert T.sigmoid(Tensor([0.0])).values[0] == 0.5


def test_conv1d_dilated_valid():
    x = Tensor(np.array([1.0, 2.0, 3.0, 4.0])[:, None])
    w = Tensor(np.array([1.0, 1.0]).reshape(2, 1, 1))
    y = T.conv1d(x, w, dilation=2, padding="valid").values[:, 0]
    # y[i] = x[i] + x[i+2]
    assert y.tolist() == [4.0, 6.0]


def _conv_loop(x, w, b, dilation):
    """Same-padded cross-correlation written as explicit loops."""
    k, c_in, c_out = w.shape
    length = x.shape[0]
    span = dilation * (k - 1)
    left = span // 2
    y = np.zeros((length, c_out))
    for i in range(length):
        for j in range(k):
            src = i + j * dilation - left
            if 0 <= src < length:
                y[i] += x[src] @ w[j]
    return y + b


@pytest.mark.parametrize("dilation", [1, 2, 3])
def test_conv1d_same_matches_loop(rng, dilation):
    x = rng.standard_normal((11, 3))
    w = rng.standard_normal((3, 3, 4))
    b = rng.standard_normal(4)
    y = T.conv1d(Tensor(x), Tensor(w), Tensor(b), dilation=dilation).values
    np.testing.assert_allclose(y, _conv_loop(x, w, b, dilation), rtol=0, atol=1e-12)


def test_conv1d_dilation_one_is_plain_convolution(rng):
    x = rng.standard_normal(9)
    w = rng.standard_normal(3)
    ours = T.conv1d(Tensor(x[:, None]), Tensor(w.reshape(3, 1, 1)), padding="valid").values[:, 0]
    # numpy's correlate is the ordinary (undilated) reference
    np.testing.assert_allclose(ours, np.correlate(x, w, mode="valid"), rtol=0, atol=1e-14)
    dilated_one = T.conv1d(Tensor(x[:, None]), Tensor(w.reshape(3, 1, 1)), dilation=1, padding="valid").values
    assert np.array_equal(dilated_one[:, 0], ours)


def test_shape_mismatch_reports_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4,\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros(4)))
    with pytest.raises(ShapeError):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 2))))


def test_softmax_all_masked_rejected():
    with pytest.raises(MaskError):
        T.softmax(Tensor(np.zeros((2, 3))), valid=np.array([[True, False, False], [False, False, False]]))


def test_masked_fill_blocks_value_and_grad(rng):
    x = leaf(rng, 2, 4)
    where = np.array([[False, True, False, True], [True, False, False, False]])
    y = T.masked_fill(x, where, 0.0)
    assert np.all(y.values[where] == 0.0)
    T.backward(T.sum(T.mul(y, Tensor(rng.standard_normal((2, 4))))))
    assert np.all(x.grad[where] == 0.0)
    assert np.all(x.grad[~where] != 0.0)


def test_masked_softmax_gives_zero_weight_and_grad(rng):
    x = leaf(rng, 3, 5)
    valid = np.array([True, True, False, True, False])
    p = T.softmax(x, valid=valid)
    assert np.all(p.values[:, ~valid] == 0.0)
    T.backward(T.sum(T.mul(p, Tensor(rng.standard_normal((3, 5))))))
    assert np.all(x.grad[:, ~valid] == 0.0)


# ---------------------------------------------------------------- attention

def test_attention_single_key():
    q = Tensor(np.array([[0.3, -1.0]]))
    k = Tensor(np.array([[2.0, 1.0]]))
    v = Tensor(np.array([[5.0, 7.0, 9.0]]))
    out, w = scaled_dot_attention(q, k, v)
    assert w.values.tolist() == [[1.0]]
    assert out.values.tolist() == [[5.0, 7.0, 9.0]]


def test_attention_zero_query_is_uniform():
    q = Tensor(np.zeros((1, 4)))
    k = Tensor(np.arange(8.0).reshape(2, 4))
    v = Tensor(np.array([[1.0, 2.0], [3.0, 6.0]]))
    out, _ = scaled_dot_attention(q, k, v)
    np.testing.assert_allclose(out.values, [[2.0, 4.0]], atol=1e-15)


def test_attention_matches_dense_oracle(rng):
    q, k, v = rng.standard_normal((2, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 5))
    out, w = scaled_dot_attention(Tensor(q), Tensor(k), Tensor(v))
    s = q @ k.T / math.sqrt(4)
    e = np.exp(s)
    ref_w = e / e.sum(axis=1, keepdims=True)
    np.testing.assert_allclose(w.values, ref_w, rtol=0, atol=1e-12)
    np.testing.assert_allclose(out.values, ref_w @ v, rtol=0, atol=1e-12)


def test_attention_all_keys_masked_rejected(rng):
    q, k, v = (Tensor(rng.standard_normal((2, 3))) for _ in range(3))
    with pytest.raises(MaskError):
        scaled_dot_attention(q, k, v, np.array([[False, False]]))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_attention_weights_are_convex(n_q, n_k, seed):
    r = np.random.default_rng(seed)
    valid = r.random(n_k) < 0.6
    valid[r.integers(n_k)] = True
    _, w = scaled_dot_attention(Tensor(r.standard_normal((n_q, 3))), Tensor(r.standard_normal((n_k, 3))),
                                Tensor(r.standard_normal((n_k, 2))), valid[None, :])
    assert np.all(w.values >= 0)
    assert np.all(w.values[:, ~valid] == 0)
    np.testing.assert_allclose(w.values.sum(axis=1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- backward

def test_square_gradient():
    x = Tensor(np.array(3.0), requires_grad=True)
    T.backward(T.mul(x, x))
    assert x.grad == 6.0


def test_sum_softmax_gradient_is_zero(rng):
    x = leaf(rng, 5)
    T.backward(T.sum(T.softmax(x)))
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-15)


def test_matmul_sum_matches_finite_differences(rng):
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    T.backward(T.sum(T.matmul(ta, tb)))
    h = 1e-5

    def f(aa, bb):
        return float(np.sum(aa @ bb))

    for arr, grad, which in ((a, ta.grad, 0), (b, tb.grad, 1)):
        num = np.zeros_like(arr)
        for idx in np.ndindex(arr.shape):
            up, dn = arr.copy(), arr.copy()
            up[idx] += h
            dn[idx] -= h
            args_up = (up, b) if which == 0 else (a, up)
            args_dn = (dn, b) if which == 0 else (a, dn)
            num[idx] = (f(*args_up) - f(*args_dn)) / (2 * h)
        rel = np.abs(grad - num) / np.maximum(1.0, np.maximum(np.abs(grad), np.abs(num)))
        assert rel.max() < 1e-6


def test_backward_accumulates_without_zero_grad(rng):
    w = leaf(rng, 3)
    x = Tensor(rng.standard_normal(3))
    T.backward(T.sum(T.mul(T.tanh(w), x)))
    once = w.grad.copy()
    T.backward(T.sum(T.mul(T.tanh(w), x)))
    np.testing.assert_allclose(w.grad, 2 * once, rtol=1e-15)
    w.zero_grad()
    assert np.all(w.grad == 0)


def test_backward_rejects_non_scalar(rng):
    with pytest.raises(ShapeError):
        T.backward(T.tanh(leaf(rng, 3)))


def test_graph_is_topological(rng):
    a = leaf(rng, 2)
    b = T.tanh(a)
    c = T.add(b, a)
    loss = T.sum(T.mul(c, b))
    g = T.ComputationGraph(loss)
    pos = {id(n): i for i, n in enumerate(g.nodes)}
    assert len(pos) == len(g.nodes)
    for n in g.nodes:
        for p in n.parents:
            assert pos[id(p)] < pos[id(n)]
    assert g.parameters() == [a]


def test_new_tensor_has_zero_grad(rng):
    t = leaf(rng, 2, 3)
    assert t.grad.shape == (2, 3) and not t.grad.any()


# ---------------------------------------------------------------- grad_check on primitives

def _primitive_cases(rng):
    w = rng.standard_normal((2, 5, 3))
    valid = np.array([[True, True, True, False, False], [True, True, True, True, True]])
    mix = Tensor(rng.standard_normal((2, 5, 3)))

    def weighted(t):
        r = np.random.default_rng(7).standard_normal(t.shape)
        return T.sum(T.mul(t, Tensor(r)))

    x = leaf(rng, 2, 5, 3)
    y = leaf(rng, 2, 5, 3)
    bias = leaf(rng, 3)
    mat = leaf(rng, 3, 4)
    bmat = leaf(rng, 2, 3, 4)
    gamma, beta = leaf(rng, 3), leaf(rng, 3)
    kern, kb = leaf(rng, 3, 3, 2), leaf(rng, 2)
    table = leaf(rng, 6, 3)
    ids = np.array([[0, 3, 3, 5], [1, 1, 2, 0]])
    pos = Tensor(np.abs(rng.standard_normal((2, 5, 3))) + 0.5, requires_grad=True)
    return [
        ("add", lambda: weighted(T.add(x, y)), [x, y]),
        ("add_bias", lambda: weighted(T.add(x, bias)), [x, bias]),
        ("mul", lambda: weighted(T.mul(x, y)), [x, y]),
        ("mul_scalar", lambda: weighted(T.mul(x, 2.5)), [x]),
        ("sigmoid", lambda: weighted(T.sigmoid(x)), [x]),
        ("tanh", lambda: weighted(T.tanh(x)), [x]),
        ("relu", lambda: weighted(T.relu(T.add(x, Tensor(w)))), [x]),
        ("exp", lambda: weighted(T.exp(x)), [x]),
        ("log", lambda: weighted(T.log(pos)), [pos]),
        ("softplus", lambda: weighted(T.softplus(x)), [x]),
        ("softmax", lambda: weighted(T.softmax(x, axis=1)), [x]),
        ("softmax_masked", lambda: weighted(T.softmax(x, axis=1, valid=valid[..., None])), [x]),
        ("log_softmax", lambda: weighted(T.log_softmax(x, axis=-1)), [x]),
        ("matmul_shared", lambda: weighted(T.matmul(x, mat)), [x, mat]),
        ("matmul_batched", lambda: weighted(T.matmul(T.getitem(x, (slice(None), slice(0, 3))), bmat)), [x, bmat]),
        ("layer_norm", lambda: weighted(T.layer_norm(T.mul(x, mix), gamma, beta)), [x, gamma, beta]),
        ("conv1d_d1", lambda: weighted(T.conv1d(x, kern, kb, dilation=1)), [x, kern, kb]),
        ("conv1d_d2", lambda: weighted(T.conv1d(x, kern, kb, dilation=2)), [x, kern, kb]),
        ("mean_pool", lambda: weighted(T.mean_pool(x, valid)), [x]),
        ("max_pool", lambda: weighted(T.max_pool(x, valid)), [x]),
        ("concat", lambda: weighted(T.concat([x, y], axis=-1)), [x, y]),
        ("embedding", lambda: weighted(T.embedding(table, ids)), [table]),
        ("masked_fill", lambda: weighted(T.masked_fill(x, ~valid[..., None])), [x]),
        ("transpose", lambda: weighted(T.transpose(x, (1, 0, 2))), [x]),
        ("reshape", lambda: weighted(T.reshape(x, (10, 3))), [x]),
        ("l2_normalize", lambda: weighted(T.l2_normalize(x)), [x]),
        ("mean", lambda: T.mean(T.square(x)), [x]),
    ]


def test_every_primitive_passes_grad_check(rng):
    for name, fn, params in _primitive_cases(rng):
        err = T.grad_check(fn, params, h=1e-5)
        assert err < 1e-6, f"{name}: {err}"


def test_grad_check_linear_sigmoid_mse(rng):
    w, b = leaf(rng, 4, 2), leaf(rng, 2)
    x, y = Tensor(rng.standard_normal((6, 4))), rng.standard_normal((6, 2))

    def loss():
        pred = T.sigmoid(T.add(T.matmul(x, w), b))
        return T.mean(T.square(T.sub(pred, Tensor(y))))

    assert T.grad_check(loss, [w, b]) < 1e-6


def test_grad_check_constant_loss(rng):
    w = leaf(rng, 3)
    assert T.grad_check(lambda: T.sum(Tensor(np.ones(3))), [w]) == 0.0


def test_grad_check_step_bounds(rng):
    w = leaf(rng, 3)
    with pytest.raises(ValueError):
        T.grad_check(lambda: T.sum(w), [w], h=1e-2)


@pytest.mark.filterwarnings("ignore:invalid value encountered in log")
def test_grad_check_reports_non_finite_provenance(rng):
    w = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    with pytest.raises(T.NonFiniteError, match="log"):
        T.grad_check(lambda: T.sum(T.log(w)), [w])


def test_forward_is_deterministic(rng):
    x = rng.standard_normal((3, 7, 4))
    kern = rng.standard_normal((3, 4, 4))

    def run():
        return T.layer_norm(T.conv1d(Tensor(x), Tensor(kern), dilation=2), Tensor(np.ones(4)), Tensor(np.zeros(4))).values

    assert run().tobytes() == run().tobytes()
