import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ramlab import ops
from ramlab.attention import AttentionConfig, attention_forward, init_attention_weights
from ramlab.rng import RngState
from ramlab.tensor import (DimensionError, DomainError, NonFiniteError, Tape, Tensor, backward,
                           finite_diff_check, grad)

OP_TOL = 1e-5


def test_matmul_identity_and_hand_values():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    b = Tensor([[3.0, 4.0], [5.0, 6.0]])
    np.testing.assert_array_equal(ops.matmul(eye, b).data, b.data)
    assert ops.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


def test_matmul_gradient(backend, rs):
    a = rs.normal(size=(5, 7))
    b = rs.normal(size=(7, 3))
    w = rs.normal(size=(5, 3))
    assert finite_diff_check(lambda t: ops.sum(ops.mul(ops.matmul(t, b), w)), a) <= 1e-6
    assert finite_diff_check(lambda t: ops.sum(ops.mul(ops.matmul(a, t), w)), b) <= 1e-6


def test_matmul_gradient_rule(rs):
    a, b = rs.normal(size=(4, 3)), rs.normal(size=(3, 2))
    g = rs.normal(size=(4, 2))
    tape = Tape()
    at, bt = tape.watch(a), tape.watch(b)
    grads = backward(ops.sum(ops.mul(ops.matmul(at, bt), g)))
    np.testing.assert_allclose(grads[at], g @ b.T, rtol=1e-13)
    np.testing.assert_allclose(grads[bt], a.T @ g, rtol=1e-13)


def test_softmax_examples(backend):
    np.testing.assert_allclose(ops.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data, [[1 / 3] * 3],
                               rtol=1e-15)
    np.testing.assert_allclose(ops.softmax_rows(Tensor([[np.log(2.0), 0.0]])).data,
                               [[2 / 3, 1 / 3]], rtol=1e-14)
    big = ops.softmax_rows(Tensor([[1000.0, 0.0]])).data
    assert np.isfinite(big).all()
    assert big[0, 0] == pytest.approx(1.0) and big[0, 1] == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(1, 9), st.floats(0.1, 200.0), st.integers(0, 2 ** 32 - 1))
def test_softmax_rows_are_distributions(rows, cols, spread, seed):
    a = np.random.default_rng(seed).uniform(-spread, spread, (rows, cols))
    m = ops.softmax_rows(Tensor(a)).data
    assert np.all(m >= 0) and np.all(m <= 1)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)


def test_softmax_gradient(backend, rs):
    x = rs.normal(size=(4, 5))
    f = lambda t: ops.sum(ops.mul(ops.softmax_rows(t), np.eye(4, 5)[[0]]))  # noqa: E731
    assert finite_diff_check(f, x) <= 1e-6


def test_softmax_masked_rows(backend, rs):
    a = rs.normal(size=(3, 4))
    mask = np.array([[1, 1, 0, 0], [0, 1, 1, 1], [1, 0, 0, 1]], dtype=bool)
    m = ops.softmax_rows(Tensor(a), mask).data
    assert np.all(m[~mask] == 0.0)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)
    w = rs.normal(size=(3, 4))
    assert finite_diff_check(lambda t: ops.sum(ops.mul(ops.softmax_rows(t, mask), w)), a) <= OP_TOL


def test_saturate_examples(backend):
    v = ops.saturate(Tensor([0.0, 1.0, -1.0, 1e9])).data
    assert v[0] == 0.0 and v[1] == 0.5 and v[2] == -0.5
    assert abs(v[3] - 1.0) <= 1e-8 and v[3] < 1.0


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=2, max_size=20))
def test_saturate_range_and_monotone(xs):
    x = np.sort(np.unique(np.array(xs)))
    y = ops.saturate(Tensor(x)).data
    assert np.all(np.abs(y) < 1.0)
    assert np.all(np.diff(y) >= 0)  # strict in exact arithmetic; float ties at the asymptote


def test_saturate_gradient(backend, rs):
    x = rs.normal(size=(3, 4)) * 3
    tape = Tape()
    xt = tape.watch(x)
    g = backward(ops.sum(ops.saturate(xt)))[xt]
    np.testing.assert_allclose(g, 1.0 / (1.0 + np.abs(x)) ** 2, rtol=1e-14)
    assert finite_diff_check(lambda t: ops.sum(ops.square(ops.saturate(t))), x) <= OP_TOL


def test_elementwise_examples():
    assert ops.add(Tensor([1.0, 2.0]), Tensor([3.0, 4.0])).data.tolist() == [4.0, 6.0]
    assert ops.log(Tensor([1.0])).data.tolist() == [0.0]
    with pytest.raises(DomainError):
        ops.log(Tensor([0.0, 1.0]))
    with pytest.raises(DimensionError):
        ops.add(Tensor(np.ones(3)), Tensor(np.ones(4)))


@pytest.mark.parametrize("name", ["add", "sub", "mul", "div"])
def test_binary_gradients_with_broadcast(name, rs):
    op = getattr(ops, name)
    a = rs.uniform(0.5, 2.0, (4, 4))
    b = rs.uniform(0.5, 2.0, (4,))
    assert finite_diff_check(lambda t: ops.sum(ops.square(op(t, b))), a) <= OP_TOL
    assert finite_diff_check(lambda t: ops.sum(ops.square(op(a, t))), b) <= OP_TOL


@pytest.mark.parametrize("name", ["exp", "log", "abs", "relu", "gelu", "square"])
def test_unary_gradients(name, backend, rs):
    op = getattr(ops, name)
    x = rs.uniform(0.2, 2.0, (4, 4)) * rs.choice([-1, 1], (4, 4))
    if name == "log":
        x = np.abs(x)
    assert finite_diff_check(lambda t: ops.sum(ops.mul(op(t), x)), x) <= OP_TOL


def test_reduce_examples():
    assert ops.variance(Tensor([1.0, 1.0, 1.0, 1.0])).item() == 0.0
    assert ops.variance(Tensor([0.0, 2.0])).item() == 1.0
    assert ops.mean(Tensor([[1.0, 2.0], [3.0, 6.0]]), axis=0).data.tolist() == [2.0, 4.0]
    with pytest.raises(ValueError):
        ops.sum(Tensor(np.ones((0, 3))))


def test_reduce_gradients(rs):
    x = rs.normal(size=(3, 5))
    tape = Tape()
    xt = tape.watch(x)
    np.testing.assert_array_equal(backward(ops.sum(xt))[xt], np.ones_like(x))
    w = rs.normal(size=(3,))
    for kind in ("sum", "mean", "variance"):
        f = lambda t, k=kind: ops.sum(ops.mul(getattr(ops, k)(t, axis=1), w))  # noqa: E731
        assert finite_diff_check(f, x) <= OP_TOL
    assert finite_diff_check(lambda t: ops.variance(t), x) <= OP_TOL
    assert finite_diff_check(lambda t: ops.sum(ops.logsumexp(t, axis=-1)), x) <= OP_TOL


def test_layernorm_examples(backend):
    ones, zeros = Tensor(np.ones(2)), Tensor(np.zeros(2))
    np.testing.assert_allclose(ops.layernorm(Tensor([[0.0, 2.0]]), ones, zeros).data,
                               [[-1.0, 1.0]], atol=1e-5)
    const = ops.layernorm(Tensor(np.full((2, 5), 3.7)), Tensor(np.ones(5)), Tensor(np.zeros(5)))
    np.testing.assert_array_equal(const.data, np.zeros((2, 5)))


def test_layernorm_gradient(backend, rs):
    x = rs.normal(size=(3, 8))
    g, b = rs.normal(size=8), rs.normal(size=8)
    w = rs.normal(size=(3, 8))
    assert finite_diff_check(lambda t: ops.sum(ops.mul(ops.layernorm(t, g, b), w)), x) <= OP_TOL
    assert finite_diff_check(lambda t: ops.sum(ops.mul(ops.layernorm(x, t, b), w)), g) <= OP_TOL
    assert finite_diff_check(lambda t: ops.sum(ops.mul(ops.layernorm(x, g, t), w)), b) <= OP_TOL


def test_backward_simple_cases():
    for shape in [(3,), (2, 4), (2, 1, 3)]:
        tape = Tape()
        xt = tape.watch(np.arange(np.prod(shape), dtype=float).reshape(shape))
        np.testing.assert_array_equal(backward(ops.sum(xt))[xt], np.ones(shape))
    _, g = grad(lambda t: ops.sum(ops.square(t)), np.array([1.0, 2.0]))
    assert g.tolist() == [2.0, 4.0]


def test_backward_rejects_non_scalar():
    tape = Tape()
    xt = tape.watch(np.ones(3))
    with pytest.raises(DimensionError):
        backward(ops.scale(xt, 2.0))


def test_tape_topological_order_and_reset():
    tape = Tape()
    x = tape.watch(np.ones(2))
    y = ops.sum(ops.exp(ops.scale(x, 2.0)))
    for e in tape.entries:
        assert all(i is None or i < e.output for i in e.inputs)
    g1 = backward(y)[x]
    g2 = backward(y)[x]  # tape kept; backward can be rerun
    np.testing.assert_array_equal(g1, g2)
    tape.reset()
    assert len(tape) == 0


def test_non_finite_is_an_error():
    with pytest.raises(NonFiniteError):
        Tensor([np.nan])
    with pytest.raises(NonFiniteError):
        ops.exp(Tensor([1000.0]))


def test_tensor_is_immutable():
    t = Tensor([1.0, 2.0])
    with pytest.raises(ValueError):
        t.data[0] = 5.0


def test_finite_diff_check_oracles(rs):
    # sum is linear: with an exactly representable step and integer inputs the
    # central difference is exact
    x = rs.integers(-5, 5, (3, 4)).astype(float)
    assert finite_diff_check(lambda t: ops.sum(t), x, step=2.0 ** -20) == 0.0
    f = lambda t: ops.sum(ops.mul(ops.softmax_rows(t), np.eye(3, 4)[[0]]))  # noqa: E731
    assert finite_diff_check(f, rs.normal(size=(3, 4))) <= 1e-6


def test_finite_diff_mas_attention_norm(rs):
    cfg = AttentionConfig(mode="mas", heads=2, d_k=4)
    w = init_attention_weights(cfg, 8, RngState(3), std=0.5)
    f = lambda t: ops.sum(ops.square(attention_forward(t, w, cfg)))  # noqa: E731
    assert finite_diff_check(f, rs.normal(size=(6, 8))) <= 1e-5


def test_replay_is_bit_identical():
    cfg = AttentionConfig(mode="ram", heads=2, d_k=4)
    w = init_attention_weights(cfg, 8, RngState(3), std=0.5)
    x = np.random.default_rng(0).normal(size=(6, 8))
    a = attention_forward(x, w, cfg, RngState(5).child(1)).data
    b = attention_forward(x, w, cfg, RngState(5).child(1)).data
    assert a.tobytes() == b.tobytes()


def test_image_plumbing_gradients(rs):
    x = rs.uniform(size=(8, 8, 3))
    assert ops.patchify(Tensor(x), 4).shape == (4, 48)
    assert finite_diff_check(lambda t: ops.sum(ops.square(ops.patchify(t, 4))), x) <= OP_TOL
    up = ops.upsample_nearest(Tensor(rs.normal(size=(2, 2, 3))), 4)
    assert up.shape == (8, 8, 3)
    assert finite_diff_check(lambda t: ops.sum(ops.square(ops.upsample_nearest(t, 2))),
                             rs.normal(size=(2, 2, 3))) <= OP_TOL
    assert finite_diff_check(lambda t: ops.sum(ops.square(ops.translate(t, 1, -2))), x) <= OP_TOL
