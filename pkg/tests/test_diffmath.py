import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vemfuse import diffmath as dm
from vemfuse.diffmath import Tensor


def numeric_grad(fn, x, h=1e-6):
    """Central differences of scalar ``fn`` w.r.t. every entry of ``x``."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = fn(x)
        x[i] = old - h
        down = fn(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def check_unary(op, x, weight=None, tol=1e-6):
    rng = np.random.default_rng(0)
    w = rng.normal(size=op(Tensor(x)).shape) if weight is None else weight
    t = Tensor(x.copy(), requires_grad=True)
    dm.backward(dm.tsum(op(t) * w))
    num = numeric_grad(lambda a: float((op(Tensor(a)).data * w).sum()), x.copy())
    np.testing.assert_allclose(t.grad, num, rtol=tol, atol=tol)


UNARY = {
    "exp": dm.exp,
    "tanh": dm.tanh,
    "sigmoid": dm.sigmoid,
    "softplus": dm.softplus,
    "softmax": lambda t: dm.softmax(t, -1),
    "softmax_T3": lambda t: dm.softmax(t, -1, 3.0),
    "log_softmax": lambda t: dm.log_softmax(t, -1),
    "log_softmax_T": lambda t: dm.log_softmax(t, 0, 0.5),
    "sum_axis": lambda t: dm.tsum(t, axis=1),
    "mean": lambda t: dm.mean(t, axis=0, keepdims=True),
    "transpose": dm.transpose,
    "reshape": lambda t: dm.reshape(t, (-1,)),
    "index": lambda t: t[1:, ::2],
    "take": lambda t: dm.take(t, np.array([2, 0, 2])),
    "index_add": lambda t: dm.index_add(t, np.array([1, 1, 0]), 4),
}


@pytest.mark.parametrize("name", sorted(UNARY))
def test_unary_gradients(name):
    x = np.random.default_rng(1).normal(size=(3, 4))
    check_unary(UNARY[name], x)


def test_log_and_relu_away_from_kinks():
    x = np.random.default_rng(2).uniform(0.5, 2.0, size=(3, 3))
    check_unary(dm.log, x)
    check_unary(dm.relu, x * np.where(np.arange(9).reshape(3, 3) % 2, 1, -1))
    check_unary(lambda t: dm.clamp_min(t, 1.0), x)


@pytest.mark.parametrize("op", [dm.add, dm.sub, dm.mul, dm.div])
def test_broadcast_binary(op):
    rng = np.random.default_rng(3)
    a = rng.uniform(1, 2, size=(3, 4))
    b = rng.uniform(1, 2, size=(4,))
    w = rng.normal(size=(3, 4))
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    dm.backward(dm.tsum(op(ta, tb) * w))
    na = numeric_grad(lambda x: float((op(Tensor(x), Tensor(b)).data * w).sum()), a.copy())
    nb = numeric_grad(lambda x: float((op(Tensor(a), Tensor(x)).data * w).sum()), b.copy())
    np.testing.assert_allclose(ta.grad, na, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(tb.grad, nb, rtol=1e-6, atol=1e-8)


@pytest.mark.parametrize("sa,sb", [((3, 4), (4, 2)), ((2, 3, 4), (4, 5)), ((2, 3, 4), (2, 4, 3)),
                                   ((4,), (4, 3)), ((3, 4), (4,))])
def test_matmul_shapes(sa, sb):
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=sa), rng.normal(size=sb)
    w = rng.normal(size=np.matmul(a, b).shape)
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    dm.backward(dm.tsum(dm.matmul(ta, tb) * w))
    na = numeric_grad(lambda x: float((np.matmul(x, b) * w).sum()), a.copy())
    nb = numeric_grad(lambda x: float((np.matmul(a, x) * w).sum()), b.copy())
    np.testing.assert_allclose(ta.grad, na, rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(tb.grad, nb, rtol=1e-6, atol=1e-8)


def test_ccorr_matches_direct_sum():
    rng = np.random.default_rng(5)
    a, b = rng.normal(size=(3, 6)), rng.normal(size=(3, 6))
    n = a.shape[1]
    direct = np.array([[sum(a[r, i] * b[r, (i + k) % n] for i in range(n)) for k in range(n)]
                       for r in range(3)])
    np.testing.assert_allclose(dm.ccorr(Tensor(a), Tensor(b)).data, direct, atol=1e-12)
    w = rng.normal(size=(3, 6))
    ta, tb = Tensor(a.copy(), requires_grad=True), Tensor(b.copy(), requires_grad=True)
    dm.backward(dm.tsum(dm.ccorr(ta, tb) * w))
    na = numeric_grad(lambda x: float((dm.ccorr(Tensor(x), Tensor(b)).data * w).sum()), a.copy())
    nb = numeric_grad(lambda x: float((dm.ccorr(Tensor(a), Tensor(x)).data * w).sum()), b.copy())
    np.testing.assert_allclose(ta.grad, na, atol=1e-7)
    np.testing.assert_allclose(tb.grad, nb, atol=1e-7)


def test_concat_gradient():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(1, 3))
    ta, tb = Tensor(a, requires_grad=True), Tensor(b, requires_grad=True)
    w = rng.normal(size=(3, 3))
    dm.backward(dm.tsum(dm.concat([ta, tb], 0) * w))
    np.testing.assert_array_equal(ta.grad, w[:2])
    np.testing.assert_array_equal(tb.grad, w[2:])


def test_bce_with_logits_matches_formula():
    x = np.array([[-30.0, -1.0, 0.0, 2.0, 40.0]])
    y = np.array([[0.0, 1.0, 0.5, 0.1, 1.0]])
    out = dm.bce_with_logits(Tensor(x), y).data
    p = 1 / (1 + np.exp(-x))
    with np.errstate(divide="ignore", invalid="ignore"):
        ref = -(y * np.log(p) + (1 - y) * np.log1p(-p))
    np.testing.assert_allclose(out[:, 1:4], ref[:, 1:4], rtol=1e-12)
    assert np.all(np.isfinite(out))
    check_unary(lambda t: dm.bce_with_logits(t, y[:, :3].repeat(2, 0)), np.random.default_rng(0).normal(size=(2, 3)))


def test_shared_subexpression_accumulates():
    x = Tensor(np.array([1.5]), requires_grad=True)
    y = x * x
    dm.backward(dm.tsum(y + y * x))  # 2x^2... d/dx (x^2 + x^3) = 2x + 3x^2
    assert x.grad[0] == pytest.approx(2 * 1.5 + 3 * 1.5 ** 2)


def test_leaf_grads_accumulate_until_zeroed():
    x = Tensor(np.ones(2), requires_grad=True)
    dm.backward(dm.tsum(x * 3.0))
    dm.backward(dm.tsum(x * 3.0))
    np.testing.assert_array_equal(x.grad, [6.0, 6.0])
    dm.zero_grad([x])
    assert x.grad is None


def test_backward_errors():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ValueError, match="scalar"):
        dm.backward(x * 2.0)
    with pytest.raises(ValueError, match="recorded"):
        dm.backward(Tensor(np.array(1.0)))
    with pytest.raises(TypeError):
        dm.backward(1.0)


def test_deep_chain_does_not_recurse():
    x = Tensor(np.array([0.5]), requires_grad=True)
    y = x
    for _ in range(5000):
        y = y * 1.0
    dm.backward(dm.tsum(y))
    assert x.grad[0] == 1.0


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
              elements=st.floats(-50, 50)),
       st.floats(0.1, 10))
def test_softmax_T_is_a_distribution(logits, temp):
    p = dm.softmax_T(logits, temp)
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
    # order preserved
    i, j = np.unravel_index(np.argmax(logits), logits.shape)
    assert p[i, j] == p[i].max()


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 8), st.integers(0, 10_000))
def test_kl_properties(n, seed):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.ones(n))
    q = rng.dirichlet(np.ones(n))
    assert dm.kl_div(p, q) >= -1e-12
    assert dm.kl_div(p, p) == pytest.approx(0.0, abs=1e-12)
    # KL = cross-entropy - entropy
    assert dm.kl_div(p, q) == pytest.approx(dm.cross_entropy(p, np.log(q)) - dm.entropy(p), abs=1e-10)


def test_kl_zero_mass_and_mismatch():
    assert dm.kl_div([0.0, 1.0], [0.5, 0.5]) == pytest.approx(np.log(2))
    assert np.isfinite(dm.kl_div([0.5, 0.5], [1.0, 0.0]))
    with pytest.raises(ValueError, match="length"):
        dm.kl_div([0.5, 0.5], [1.0, 0.0, 0.0])


def test_kl_tensor_gradient_in_q():
    rng = np.random.default_rng(7)
    p = rng.dirichlet(np.ones(5))
    q = rng.dirichlet(np.ones(5))
    t = Tensor(q.copy(), requires_grad=True)
    dm.backward(dm.kl_div(p, t))
    np.testing.assert_allclose(t.grad, -p / q, rtol=1e-12)


def test_softmax_rejects_non_finite():
    with pytest.raises(ValueError, match="non-finite"):
        dm.softmax(Tensor(np.array([1.0, np.nan])))


def test_finite_diff_check_catches_wrong_gradient():
    w = Tensor(np.random.default_rng(0).normal(size=(4,)), requires_grad=True)

    def good():
        return dm.tsum(dm.tanh(w) * w)

    assert dm.finite_diff_check(good, [w]) < 1e-6

    def bad():
        return dm._node(np.array((w.data ** 2).sum()), (w,), lambda g: (g * w.data,))

    assert dm.finite_diff_check(bad, [w]) > 0.1
    with pytest.raises(ValueError):
        dm.finite_diff_check(good, [w], step=0)


def test_adam_matches_reference_update():
    rng = np.random.default_rng(8)
    x0 = rng.normal(size=3)
    p = Tensor(x0.copy(), requires_grad=True)
    opt = dm.Adam([p], lr=0.1, grad_clip=None)
    m = v = np.zeros(3)
    x = x0.copy()
    for t in range(1, 4):
        opt.zero_grad()
        dm.backward(dm.tsum(p * p))
        opt.step()
        g = 2 * x
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.1 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    np.testing.assert_allclose(p.data, x, rtol=1e-12)


def test_adam_clips_global_norm():
    a = Tensor(np.zeros(2), requires_grad=True)
    b = Tensor(np.zeros(2), requires_grad=True)
    a.grad = np.array([30.0, 40.0])
    b.grad = np.zeros(2)
    opt = dm.Adam([a, b], lr=1.0, grad_clip=1.0)
    norm = opt.step()
    assert norm == pytest.approx(50.0)
    np.testing.assert_allclose(opt.m[0], 0.1 * np.array([0.6, 0.8]))


def test_checkpoint_roundtrip(tmp_path):
    arrays = {"w": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5, -2.0])}
    bin_path, json_path = dm.save_checkpoint(tmp_path / "m", arrays, {"tag": "x"})
    assert bin_path.suffix == ".bin" and json_path.suffix == ".json"
    loaded, meta = dm.load_checkpoint(tmp_path / "m")
    assert meta == {"tag": "x"}
    for k in arrays:
        assert loaded[k].dtype == arrays[k].dtype
        np.testing.assert_array_equal(loaded[k], arrays[k])
    assert json.loads(json_path.read_text())["tensors"]["w"]["shape"] == [2, 3]
    with pytest.raises(FileNotFoundError):
        dm.load_checkpoint(tmp_path / "missing")
