import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nuta import tensor as tc
from nuta.gradcheck import check_gradients
from nuta.tensor import NonFiniteError, ShapeError, Tensor


def naive_matmul(a, b):
    p, k = a.shape
    q = b.shape[1]
    out = np.zeros((p, q))
    for i in range(p):
        for j in range(q):
            s = 0.0
            for r in range(k):
                s += a[i, r] * b[r, j]
            out[i, j] = s
    return out


def test_matmul_identity():
    out = tc.matmul(Tensor(np.eye(2)), Tensor([[1.0, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_projector_row():
    out = tc.matmul(Tensor([[1.0, 0], [0, 0]]), Tensor([[5.0, 6], [7, 8]]))
    np.testing.assert_array_equal(out.data, [[5, 6], [0, 0]])


def test_matmul_vs_triple_loop():
    rng = np.random.default_rng(0)
    a, b = rng.standard_normal((3, 4)), rng.standard_normal((4, 2))
    out = tc.matmul(Tensor(a), Tensor(b)).data
    np.testing.assert_allclose(out, naive_matmul(a, b), rtol=0, atol=1e-14)


def test_matmul_batched_and_errors():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((2, 3, 3, 4)), rng.standard_normal((2, 3, 4, 5))
    out = tc.matmul(Tensor(a), Tensor(b)).data
    for i in range(2):
        for j in range(3):
            np.testing.assert_allclose(out[i, j], naive_matmul(a[i, j], b[i, j]), atol=1e-13)
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        tc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
    with pytest.raises(ShapeError):
        tc.matmul(Tensor(np.ones((2, 2, 3))), Tensor(np.ones((3, 3, 1))))


@pytest.mark.parametrize("x, expected", [
    ([0.0, 0.0], [0.5, 0.5]),
    ([0.0, np.log(3.0)], [0.25, 0.75]),
    ([1000.0, 1000.0], [0.5, 0.5]),
])
def test_softmax_examples(x, expected):
    out = tc.softmax_lastdim(Tensor(x)).data
    np.testing.assert_allclose(out, expected, atol=1e-12)
    assert np.all(np.isfinite(out))


def test_softmax_rejects_nan():
    with pytest.raises(NonFiniteError):
        tc.softmax_lastdim(Tensor([0.0, np.nan]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=9), st.integers(1, 4))
def test_softmax_rows_sum_to_one(values, rows):
    x = np.tile(np.asarray(values), (rows, 1))
    out = tc.softmax_lastdim(Tensor(x)).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(-1), 1.0, atol=1e-6)


def test_reshape_preserves_flat_order():
    x = Tensor(np.arange(6.0).reshape(2, 3))
    y = tc.reshape(x, (3, 2))
    np.testing.assert_array_equal(y.data.reshape(-1), x.data.reshape(-1))
    with pytest.raises(ShapeError):
        tc.reshape(x, (4, 2))


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(1, 4), min_size=1, max_size=4))
def test_reshape_roundtrip_identity(dims):
    x = Tensor(np.arange(float(np.prod(dims))).reshape(dims))
    flat = tc.reshape(x, (x.size,))
    back = tc.reshape(flat, dims)
    np.testing.assert_array_equal(back.data, x.data)


def test_permute_rejects_non_permutation():
    with pytest.raises(ShapeError):
        tc.permute(Tensor(np.zeros((2, 3))), (0, 0))


def test_concat_channels_shape():
    a, b = Tensor(np.zeros((2, 4, 3, 2, 2))), Tensor(np.ones((2, 8, 3, 2, 2)))
    assert tc.concat_channels(a, b).shape == (2, 12, 3, 2, 2)
    with pytest.raises(ShapeError):
        tc.concat_channels(a, Tensor(np.ones((2, 8, 4, 2, 2))))


def test_dropout_eval_is_identity_and_train_scales():
    x = Tensor(np.ones((50, 40)))
    assert tc.dropout(x, 0.6, False) is x
    y = tc.dropout(x, 0.6, True, np.random.default_rng(0)).data
    kept = y[y > 0]
    np.testing.assert_allclose(kept, 1 / 0.4)
    assert abs((y > 0).mean() - 0.4) < 0.05


def test_backward_sum_gives_ones():
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 4)), requires_grad=True)
    tc.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))


def test_backward_half_square_gives_x():
    x = Tensor(np.random.default_rng(1).standard_normal((3, 5)), requires_grad=True)
    tc.mul(tc.sum_all(tc.mul(x, x)), 0.5).backward()
    np.testing.assert_allclose(x.grad, x.data, atol=1e-15)


def test_backward_accumulates_until_reset():
    x = Tensor(np.ones(3), requires_grad=True)
    tc.sum_all(x).backward()
    tc.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, [2, 2, 2])
    x.zero_grad()
    tc.sum_all(x).backward()
    np.testing.assert_array_equal(x.grad, [1, 1, 1])


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        tc.mul(x, 2.0).backward()
    with pytest.raises(RuntimeError, match="detached"):
        tc.sum_all(Tensor(np.ones(3))).backward()


def test_tape_is_topological():
    x = Tensor(np.ones((2, 2)), requires_grad=True)
    y = tc.relu(tc.matmul(x, x))
    z = tc.sum_all(tc.add(y, x))
    tape = tc.Tape.of(z)
    assert tape.op_names() == ["matmul", "relu", "add", "sum"]
    position = {id(t): i for i, t in enumerate(tape.nodes)}
    for i, t in enumerate(tape.nodes):
        for p in t._node.parents:
            if p._node is not None:
                assert position[id(p)] < i


def test_backward_is_linear():
    rng = np.random.default_rng(3)
    x = Tensor(rng.standard_normal((3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((4, 2)))

    def loss1():
        return tc.sum_all(tc.softmax_lastdim(tc.matmul(x, w)))

    def loss2():
        return tc.sum_all(tc.mul(tc.relu(x), x))

    loss1().backward()
    g1 = x.grad.copy()
    x.zero_grad()
    loss2().backward()
    g2 = x.grad.copy()
    x.zero_grad()
    a, b = 0.7, -2.5
    tc.add(tc.mul(loss1(), a), tc.mul(loss2(), b)).backward()
    np.testing.assert_allclose(x.grad, a * g1 + b * g2, atol=1e-10, rtol=0)


def test_composite_chain_matches_finite_differences():
    rng = np.random.default_rng(4)
    x = Tensor(rng.standard_normal((2, 3, 4)), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 4, 3)), requires_grad=True)

    def fn():
        h = tc.relu(tc.matmul(x, w))
        h = tc.permute(tc.reshape(h, (2, 9)), (1, 0))
        return tc.mean_lastdims(tc.softmax_lastdim(h), 1)

    errs = check_gradients(fn, [x, w], rng)
    assert max(errs.values()) < 1e-4


def test_mac_counter_counts_matmul():
    with tc.count_macs() as c:
        tc.matmul(Tensor(np.ones((2, 3, 4))), Tensor(np.ones((2, 4, 5))))
    assert c == {"matmul": 2 * 3 * 4 * 5}
