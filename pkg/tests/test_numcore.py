import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mmasr import numcore as nc
from mmasr.errors import ConfigError, ContractError, DimensionError


def rand(rng, *shape):
    return rng.standard_normal(shape)


def check(f, params, tol=1e-6, h=1e-5):
    err = nc.grad_check(f, params, h=h, max_coords=None)
    assert err < tol, err


def test_matmul_identity_and_closed_form():
    B = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(nc.matmul(np.eye(3), B).data, B)
    assert nc.matmul([[1.0, 2.0]], [[3.0], [4.0]]).data.tolist() == [[11.0]]


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
        nc.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def test_matmul_gradient():
    rng = np.random.default_rng(1)
    a = nc.param(rand(rng, 4, 5), "a")
    b = nc.param(rand(rng, 5, 2), "b")
    w = rand(rng, 4, 2)
    check(lambda: nc.total(nc.mul(nc.matmul(a, b), nc.tensor(w))), [a, b])


def test_softmax_examples():
    assert np.allclose(nc.softmax(np.array([0.0, 0.0])).data, [0.5, 0.5])
    assert np.allclose(nc.softmax(np.array([0.0, np.log(3.0)])).data, [0.25, 0.75])
    x = np.array([0.3, -1.2, 2.0])
    assert np.allclose(nc.softmax(x + 17.0).data, nc.softmax(x).data)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=8))
def test_softmax_sums_to_one_for_large_inputs(xs):
    y = nc.softmax(np.array(xs)).data
    assert np.all(np.isfinite(y))
    assert abs(y.sum() - 1.0) < 1e-6


def test_elementwise_trivia():
    assert nc.elementwise("tanh", np.array(0.0)).data == 0.0
    assert nc.elementwise("sigmoid", np.array(0.0)).data == 0.5
    x = np.random.default_rng(0).standard_normal((3, 4))
    out = nc.elementwise("affine", x, np.zeros((2, 4)), np.zeros(2))
    assert np.array_equal(out.data, np.zeros((3, 2)))
    with pytest.raises(ConfigError):
        nc.elementwise("relu", x)


def test_add_broadcast_rules():
    a = np.zeros((2, 3, 4))
    assert nc.add(a, np.ones(4)).shape == (2, 3, 4)
    assert nc.add(a, np.ones((2, 4))).shape == (2, 3, 4)
    with pytest.raises(DimensionError):
        nc.add(a, np.ones(3))
    with pytest.raises(DimensionError):
        nc.mul(np.ones((2, 2)), np.ones(2))


@pytest.mark.parametrize("op", ["tanh", "sigmoid", "softmax", "log_softmax"])
def test_unary_gradients(op):
    rng = np.random.default_rng(2)
    x = nc.param(rand(rng, 3, 5), "x")
    w = nc.tensor(rand(rng, 3, 5))
    fn = getattr(nc, op)
    check(lambda: nc.total(nc.mul(fn(x), w)), [x])


def test_binary_and_shape_gradients():
    rng = np.random.default_rng(3)
    a = nc.param(rand(rng, 2, 3, 4), "a")
    v = nc.param(rand(rng, 4), "v")
    s = nc.param(rand(rng, 2, 4), "s")
    W = nc.param(rand(rng, 5, 4), "W")
    b = nc.param(rand(rng, 5), "b")
    w = nc.tensor(rand(rng, 2, 3, 5))

    def f():
        y = nc.add(nc.add(a, v), s)
        y = nc.tanh(nc.affine(y, W, b))
        return nc.total(nc.mul(y, w))

    check(f, [a, v, s, W, b])


def test_concat_stack_embedding_mean_gradients():
    rng = np.random.default_rng(4)
    a = nc.param(rand(rng, 3, 2), "a")
    b = nc.param(rand(rng, 3, 4), "b")
    E = nc.param(rand(rng, 6, 3), "E")
    ids = np.array([[1, 5, 1], [0, 2, 2]])

    def f():
        c = nc.concat([a, b], axis=-1)
        s = nc.stack([c, nc.tanh(c)], axis=1)
        e = nc.embedding(E, ids)
        m = nc.masked_mean_time(e, np.array([[1, 1, 0], [1, 1, 1]]))
        sub, _ = nc.subsample_time(s, np.ones((3, 2)))
        return nc.add(nc.mean(nc.tanh(sub)), nc.total(nc.tanh(m)))

    check(f, [a, b, E])


def test_cross_entropy_gradient_and_masking():
    rng = np.random.default_rng(5)
    L = nc.param(rand(rng, 2, 3, 7), "L")
    t = rng.integers(0, 7, size=(2, 3))
    m = np.array([[1, 1, 0], [1, 0, 0]])
    check(lambda: nc.cross_entropy(L, t, m), [L])
    with pytest.raises(ContractError):
        nc.cross_entropy(L, t, np.zeros((2, 3)))


def test_lstm_sequence_gradient_with_padding_and_init_state():
    rng = np.random.default_rng(6)
    B, T, D, H = 3, 5, 4, 3
    x = nc.param(rand(rng, B, T, D), "x")
    Wi = nc.param(rand(rng, 4 * H, D) * 0.5, "Wi")
    Wh = nc.param(rand(rng, 4 * H, H) * 0.5, "Wh")
    b = nc.param(rand(rng, 4 * H) * 0.5, "b")
    h0 = nc.param(rand(rng, B, H) * 0.5, "h0")
    c0 = nc.param(rand(rng, B, H) * 0.5, "c0")
    mask = np.array([[1, 1, 1, 1, 1], [1, 1, 1, 0, 0], [1, 0, 0, 0, 0]])
    w = nc.tensor(rand(rng, B, T, H))
    for reverse in (False, True):
        check(lambda: nc.total(nc.mul(nc.lstm_sequence(x, mask, Wi, Wh, b, h0, c0, reverse), w)),
              [x, Wi, Wh, b, h0, c0])


def test_lstm_padding_does_not_leak():
    rng = np.random.default_rng(7)
    H, D = 3, 2
    Wi, Wh, b = rand(rng, 4 * H, D), rand(rng, 4 * H, H), rand(rng, 4 * H)
    x = rand(rng, 1, 4, D)
    padded = np.concatenate([x, rand(rng, 1, 3, D)], axis=1)
    mask = np.array([[1, 1, 1, 1, 0, 0, 0]])
    for reverse in (False, True):
        ref = nc.lstm_sequence(x, np.ones((1, 4)), Wi, Wh, b, reverse=reverse).data
        out = nc.lstm_sequence(padded, mask, Wi, Wh, b, reverse=reverse).data
        assert np.allclose(out[:, :4], ref)
        assert np.all(out[:, 4:] == 0)


def test_gru_cell_gradient():
    rng = np.random.default_rng(8)
    x = nc.param(rand(rng, 2, 4), "x")
    h = nc.param(rand(rng, 2, 3), "h")
    Wi = nc.param(rand(rng, 9, 4), "Wi")
    Wh = nc.param(rand(rng, 9, 3), "Wh")
    b = nc.param(rand(rng, 9), "b")
    w = nc.tensor(rand(rng, 2, 3))
    check(lambda: nc.total(nc.mul(nc.gru_cell(x, h, Wi, Wh, b), w)), [x, h, Wi, Wh, b])


def test_attention_gradient_and_contract():
    rng = np.random.default_rng(9)
    E = nc.param(rand(rng, 2, 4, 3), "E")
    K = nc.param(rand(rng, 2, 4, 5), "K")
    q = nc.param(rand(rng, 2, 5), "q")
    v = nc.param(rand(rng, 5), "v")
    mask = np.array([[1, 1, 1, 1], [1, 1, 0, 0]])
    w = nc.tensor(rand(rng, 2, 3))
    check(lambda: nc.total(nc.mul(nc.additive_attention(E, K, q, v, mask)[0], w)), [E, K, q, v])
    z, alpha = nc.additive_attention(E, K, q, v, mask)
    assert np.allclose(alpha.sum(axis=1), 1.0, atol=1e-12)
    assert np.all(alpha[1, 2:] == 0)


def test_dropout_contracts():
    rng = np.random.default_rng(10)
    x = np.ones(100_000)
    assert np.array_equal(nc.dropout(x, 0.0, True, rng).data, x)
    assert np.array_equal(nc.dropout(x, 0.4, False).data, x)
    y = nc.dropout(x, 0.4, True, rng).data
    survivors = np.mean(y != 0)
    assert abs(survivors - 0.6) < 0.01
    assert abs(y.mean() - 1.0) < 0.02
    for p in (-0.1, 1.0):
        with pytest.raises(ConfigError):
            nc.dropout(x, p, True, rng)


def test_backward_examples():
    W = nc.param(np.arange(6.0).reshape(2, 3), "W")
    x = np.array([1.0, -2.0, 0.5])
    with nc.Tape() as tape:
        loss = nc.total(nc.affine(x, W))
    g = nc.backward(tape, loss)
    assert np.array_equal(g["W"], np.tile(x, (2, 1)))

    w = nc.param(np.array(0.0), "w")
    with nc.Tape() as tape:
        loss = nc.mul(nc.tanh(w), nc.tanh(w))
    assert nc.backward(tape, loss)["w"] == 0.0


def test_backward_rejects_non_scalar_and_is_deterministic():
    rng = np.random.default_rng(11)
    W = nc.param(rand(rng, 3, 3), "W")
    with nc.Tape() as tape:
        y = nc.tanh(nc.affine(rand(rng, 4, 3), W))
        loss = nc.total(y)
    with pytest.raises(ContractError):
        nc.backward(tape, y)
    g1 = nc.backward(tape, loss)
    g2 = nc.backward(tape, loss)
    assert np.array_equal(g1["W"], g2["W"])


def test_grad_check_trivia():
    w = nc.param(np.array([0.7, -1.3]), "w")
    assert nc.grad_check(lambda: nc.total(nc.mul(w, w)), [w], h=1e-4) < 1e-9
    t = nc.param(np.array([0.0]), "t")
    assert nc.grad_check(lambda: nc.total(nc.tanh(t)), [t], h=1e-5) < 1e-8


def test_grad_check_detects_nondeterminism():
    rng = np.random.default_rng(0)
    w = nc.param(np.ones(3), "w")
    with pytest.raises(ContractError):
        nc.grad_check(lambda: nc.total(nc.dropout(w, 0.5, True, rng)), [w])


def test_clip_grad_norm():
    g = nc.GradientSet(a=np.array([3.0]), b=np.array([4.0]))
    c = nc.clip_grad_norm(g, 1.0)
    assert np.allclose(c["a"], [0.6]) and np.isclose(nc.global_norm(c), 1.0)
    small = nc.GradientSet(a=np.array([0.3, 0.4]))
    assert np.array_equal(nc.clip_grad_norm(small)["a"], small["a"])
    zero = nc.GradientSet(a=np.zeros(3))
    assert np.array_equal(nc.clip_grad_norm(zero)["a"], np.zeros(3))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=10), st.floats(0.01, 10.0))
def test_clip_never_exceeds_max(xs, max_norm):
    c = nc.clip_grad_norm({"g": np.array(xs)}, max_norm)
    assert nc.global_norm(c) <= max_norm + 1e-9
