import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3net import kernel as K
from m3net.kernel import ParamStore, Tensor


def leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def fd_grad(fn, t, eps=1e-5):
    g = np.zeros_like(t.data)
    flat = t.data.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = float(fn().data)
        flat[i] = orig - eps
        down = float(fn().data)
        flat[i] = orig
        g.reshape(-1)[i] = (up - down) / (2 * eps)
    return g


def rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


def probe(t, seed=99):
    w = np.random.default_rng([seed, 1]).standard_normal(t.shape)
    return K.sum_all(K.mul(t, Tensor(w)))


# ------------------------------------------------------------- matmul


def test_matmul_identity():
    out = K.matmul(np.eye(2), np.array([[1.0, 2], [3, 4]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [3, 4]])


def test_matmul_one_hot_group_aggregation():
    G = np.array([[1.0, 0], [1, 0], [0, 1]])
    H = np.array([[1.0, 2], [3, 4], [5, 6]])
    np.testing.assert_array_equal(K.matmul(K.transpose(G), H).data, [[4, 6], [5, 6]])


def test_matmul_backward_product_rule():
    a, b = leaf([[1, 2]]), leaf([[3], [4]])
    K.matmul(a, b).backward(np.array([[1.0]]))
    np.testing.assert_array_equal(a.grad, [[3, 4]])
    np.testing.assert_array_equal(b.grad, [[1], [2]])


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(K.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
        K.matmul(np.zeros((2, 3)), np.zeros((4, 2)))


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for q in range(k):
                s += a[i, q] * b[q, j]
            c[i, j] = s
    return c


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 8), st.integers(1, 8), st.integers(1, 8), st.integers(0, 2**31))
def test_matmul_matches_triple_loop(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    got = K.matmul(a, b).data
    ref = naive_matmul(a, b)
    # BLAS may fuse multiply-adds or reorder; the bound is a few ulps of sum |a||b|
    scale = np.abs(a) @ np.abs(b)
    assert np.all(np.abs(got - ref) <= 4 * k * np.finfo(float).eps * scale)
    ia, ib = np.round(a * 8), np.round(b * 8)
    np.testing.assert_array_equal(K.matmul(ia, ib).data, naive_matmul(ia, ib))


def test_batched_matmul_gradients_match_fd(rng):
    G, H = leaf(rng.standard_normal((5, 2))), leaf(rng.standard_normal((3, 5, 4)))
    fn = lambda: probe(K.matmul(K.transpose(G), H))
    fn().backward()
    assert rel_err(G.grad, fd_grad(fn, G)) < 1e-6
    assert rel_err(H.grad, fd_grad(fn, H)) < 1e-6


# ------------------------------------------------------------ softmax


def test_softmax_uniform():
    np.testing.assert_allclose(K.softmax_rows(np.zeros((1, 4))).data, [[0.25] * 4])


def test_softmax_log_ratio():
    np.testing.assert_allclose(K.softmax_rows(np.array([[math.log(1), math.log(3)]])).data,
                               [[0.25, 0.75]], rtol=1e-12)


def test_softmax_large_logits_do_not_overflow():
    y = K.softmax_rows(np.array([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(y))
    assert y[0, 0] == pytest.approx(1.0) and y[0, 1] == pytest.approx(0.0, abs=1e-300)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12))
def test_softmax_rows_sum_to_one(row):
    y = K.softmax_rows(np.array([row])).data
    assert np.all(y >= 0)
    assert abs(y.sum() - 1.0) <= 1e-6


# ----------------------------------------------------------- elementwise


def test_add_example():
    np.testing.assert_array_equal(K.add([[1.0, 2]], [[3.0, 4]]).data, [[4, 6]])


def test_column_broadcast_mul():
    out = K.mul(np.array([[0.5], [2.0]]), np.array([[2.0, 4], [1, 1]]))
    np.testing.assert_array_equal(out.data, [[1, 2], [2, 2]])


def test_relu_values_and_zero_subgradient():
    x = leaf([-1.0, 0.0, 3.0])
    y = K.relu(x)
    np.testing.assert_array_equal(y.data, [0, 0, 3])
    y.backward(np.ones(3))
    np.testing.assert_array_equal(x.grad, [0, 0, 1])


def test_incompatible_broadcast_rejected():
    with pytest.raises(K.ShapeError):
        K.mul(np.ones((2, 3)), np.ones((3, 1)))
    with pytest.raises(K.ShapeError):
        K.add(np.ones((2, 3)), np.ones((2, 1)))


# ---------------------------------------------------------------- concat


def test_concat_scalars():
    np.testing.assert_array_equal(K.concat_last_dim([[[1.0]], [[2.0]], [[3.0]]]).data, [[1, 2, 3]])


def test_concat_four_embedding_blocks_gives_hidden_width():
    parts = [np.zeros((7, 32)) for _ in range(4)]
    assert K.concat_last_dim(parts).shape == (7, 128)


def test_concat_single_part_is_identity():
    t = Tensor(np.arange(6.0).reshape(2, 3))
    assert K.concat_last_dim([t]) is t


def test_concat_leading_mismatch():
    with pytest.raises(K.ShapeError):
        K.concat_last_dim([np.zeros((2, 1)), np.zeros((3, 1))])


def test_concat_backward_slices():
    a, b = leaf(np.zeros((2, 1))), leaf(np.zeros((2, 2)))
    K.concat_last_dim([a, b]).backward(np.array([[1.0, 2, 3], [4, 5, 6]]))
    np.testing.assert_array_equal(a.grad, [[1], [4]])
    np.testing.assert_array_equal(b.grad, [[2, 3], [5, 6]])


# ------------------------------------------------------------- grad check


def test_grad_check_square():
    store = ParamStore(dtype=np.float64)
    theta = store.create("theta", (1,), zero=True)
    theta.data[:] = 3.0
    report = K.grad_check(lambda s: K.sum_all(K.mul(s["theta"], s["theta"])), store,
                          eps=1e-5, tol=1e-6)
    assert report.passed
    store.zero_grad()
    K.sum_all(K.mul(theta, theta)).backward()
    assert theta.grad[0] == pytest.approx(6.0)


def test_grad_check_dead_relu_region():
    store = ParamStore(dtype=np.float64)
    w = store.create("w", (3,), zero=True)
    w.data[:] = [-2.0, -1.0, -0.5]
    report = K.grad_check(lambda s: K.sum_all(K.relu(s["w"])), store, eps=1e-5, tol=1e-6)
    assert report.passed and report.max_rel_err["w"] == 0.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grad_check_detects_non_finite():
    store = ParamStore(dtype=np.float64)
    store.create("w", (1,), zero=True)
    with pytest.raises(K.GradCheckError, match="w"):
        K.grad_check(lambda s: K.sum_all(K.scale(s["w"], float("inf"))), store)


def test_grad_check_rejects_eps_out_of_range():
    store = ParamStore(dtype=np.float64)
    store.create("w", (1,))
    with pytest.raises(ValueError):
        K.grad_check(lambda s: K.sum_all(s["w"]), store, eps=1e-2)


def test_grad_check_catches_broken_vjp(monkeypatch):
    store = ParamStore(seed=1, dtype=np.float64)
    store.create("w", (4,), fan_in=1)
    monkeypatch.setitem(K.VJPS, "relu", lambda g, out, a: (g,))
    store["w"].data[:] = [-1.0, 0.5, -0.3, 2.0]
    report = K.grad_check(lambda s: K.sum_all(K.relu(s["w"])), store)
    assert not report.passed


# ------------------------------------------------ finite-difference property


OPS = {
    "matmul": (lambda r: [r.standard_normal((3, 4)), r.standard_normal((4, 2))],
               lambda a, b: K.matmul(a, b)),
    "softmax_rows": (lambda r: [r.standard_normal((3, 5)) * 4], K.softmax_rows),
    "mul_col": (lambda r: [r.standard_normal((3, 1)), r.standard_normal((3, 4))], K.mul),
    "mul": (lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))], K.mul),
    "sub": (lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 3))], K.sub),
    "scale": (lambda r: [r.standard_normal((2, 3))], lambda a: K.scale(a, -1.7)),
    "relu": (lambda r: [r.uniform(0.05, 1, (3, 3)) * r.choice([-1, 1], (3, 3))], K.relu),
    "concat": (lambda r: [r.standard_normal((2, 2)), r.standard_normal((2, 3))],
               lambda a, b: K.concat_last_dim([a, b])),
    "add_bias": (lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal(4)], K.add_bias),
    "take_rows": (lambda r: [r.standard_normal((5, 3))],
                  lambda t: K.take_rows(t, np.array([0, 3, 3, 1]))),
    "expand": (lambda r: [r.standard_normal((2, 3))], lambda t: K.expand(t, 1, 4)),
    "take_column": (lambda r: [r.standard_normal((3, 4))], lambda t: K.take_column(t, 2)),
    "permute": (lambda r: [r.standard_normal((2, 3, 4))], lambda t: K.permute(t, (1, 2, 0))),
    "layer_norm": (lambda r: [r.standard_normal((3, 5))], K.layer_norm),
}


@pytest.mark.parametrize("name", sorted(OPS))
@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_vjp_matches_finite_differences(name, seed):
    make, op = OPS[name]
    rng = np.random.default_rng(seed)
    leaves = [leaf(a) for a in make(rng)]
    fn = lambda: probe(op(*leaves), seed)
    fn().backward()
    for t in leaves:
        assert rel_err(t.grad, fd_grad(fn, t)) <= 1e-4


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_masked_mae_vjp(seed):
    rng = np.random.default_rng(seed)
    pred = leaf(rng.standard_normal((3, 4)))
    target = rng.standard_normal((3, 4))
    target[rng.random((3, 4)) < 0.3] = 0.0
    fn = lambda: K.masked_mae(pred, target, target != 0)
    fn().backward()
    assert rel_err(pred.grad, fd_grad(fn, pred)) <= 1e-4


# ------------------------------------------------------------ determinism


def test_kernels_are_bitwise_deterministic(rng):
    a, b = rng.standard_normal((6, 7)), rng.standard_normal((7, 5))
    run = lambda: K.softmax_rows(K.relu(K.matmul(a, b))).data
    assert np.array_equal(run(), run())


def test_init_depends_on_name_not_order():
    s1, s2 = ParamStore(seed=7), ParamStore(seed=7)
    s1.create("a", (3, 4))
    s1.create("b", (4,))
    s2.create("b", (4,))
    s2.create("a", (3, 4))
    assert np.array_equal(s1["a"].data, s2["a"].data)
    assert np.array_equal(s1["b"].data, s2["b"].data)
    assert s1.names() == ["a", "b"]


def test_init_bounds_follow_fan_in():
    s = ParamStore(seed=1)
    p = s.create("w", (64, 64), fan_in=16)
    assert np.abs(p.data).max() <= 0.25
    assert np.abs(p.data).max() > 0.2


def test_parameter_state_shapes_and_unique_names():
    s = ParamStore()
    p = s.create("x", (2, 3))
    assert p.grad.shape == p.adam_m.shape == p.adam_v.shape == p.value.shape == (2, 3)
    assert p.step_count == 0
    with pytest.raises(KeyError):
        s.create("x", (1,))


def test_no_grad_builds_no_graph():
    w = leaf(np.ones((2, 2)))
    with K.no_grad():
        out = K.matmul(w, w)
    assert not out.requires_grad and out._parents == ()
