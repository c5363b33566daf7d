import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from m3net import kernel as K
from m3net.embedding import EmbeddingParams, embed
from m3net.kernel import ParamStore, Tensor


def make_params(L=3, C=2, N=4, dims=(2, 3, 2, 1), T_d=6, T_w=7, seed=0, zero=False):
    s = ParamStore(seed, np.float64)
    D_F, D_S, D_d, D_w = dims
    p = EmbeddingParams(s.create("W_F", (L * C, D_F), L * C, zero=zero),
                        s.create("b_F", (D_F,), L * C, zero=zero),
                        s.create("E_S", (N, D_S), D_S, zero=zero),
                        s.create("E_d", (T_d, D_d), D_d, zero=zero),
                        s.create("E_w", (T_w, D_w), D_w, zero=zero))
    return p, s


def test_zero_tables_give_zero_representation():
    p, _ = make_params(zero=True)
    H = embed(np.ones((3, 4, 2)), 1, 2, p)
    assert H.shape == (4, 8)
    assert not H.data.any()


def test_default_widths_give_128():
    p, _ = make_params(L=12, C=1, N=7, dims=(32, 32, 32, 32), T_d=288)
    assert embed(np.zeros((12, 7, 1)), 0, 0, p).shape == (7, 128)
    assert p.width == 128


def test_blocks_match_loop_oracle(rng):
    p, _ = make_params()
    x = rng.standard_normal((3, 4, 2))
    H = embed(x, 4, 5, p).data
    W, b = p.W_F.data, p.b_F.data
    for n in range(4):
        flat = [x[l, n, c] for l in range(3) for c in range(2)]
        feat = [sum(flat[i] * W[i, j] for i in range(6)) + b[j] for j in range(2)]
        row = np.concatenate([feat, p.E_S.data[n], p.E_d.data[4], p.E_w.data[5]])
        np.testing.assert_allclose(H[n], row, rtol=1e-12, atol=1e-12)


def test_batch_matches_single_windows(rng):
    p, _ = make_params()
    x = rng.standard_normal((5, 3, 4, 2))
    tod, dow = np.array([0, 1, 5, 3, 3]), np.array([6, 0, 2, 2, 1])
    Hb = embed(x, tod, dow, p).data
    for b in range(5):
        np.testing.assert_array_equal(Hb[b], embed(x[b], tod[b], dow[b], p).data)


def test_tod_change_touches_only_day_block(rng):
    p, _ = make_params()
    x = rng.standard_normal((3, 4, 2))
    diff = embed(x, 1, 3, p).data != embed(x, 2, 3, p).data
    assert diff[:, 5:7].all()
    assert not diff[:, :5].any() and not diff[:, 7:].any()


def test_perturbing_week_table_changes_last_block_only(rng):
    p, _ = make_params()
    x = rng.standard_normal((3, 4, 2))
    before = embed(x, 1, 3, p).data
    p.E_w.data += 0.5
    diff = embed(x, 1, 3, p).data != before
    assert diff[:, -1].all() and not diff[:, :-1].any()


def test_day_table_gradient_hits_one_row(rng):
    p, s = make_params()
    H = embed(rng.standard_normal((3, 4, 2)), 4, 1, p)
    K.sum_all(K.mul(H, Tensor(rng.standard_normal(H.shape)))).backward()
    rows = np.flatnonzero(np.abs(p.E_d.grad).sum(axis=1))
    assert rows.tolist() == [4]
    assert np.flatnonzero(np.abs(p.E_w.grad).sum(axis=1)).tolist() == [1]


def test_repeated_index_accumulates_gradient():
    p, _ = make_params()
    H = embed(np.zeros((2, 3, 4, 2)), np.array([2, 2]), np.array([0, 0]), p)
    K.sum_all(H).backward()
    # 2 samples x 4 nodes each read row 2
    np.testing.assert_array_equal(p.E_d.grad[2], [8.0, 8.0])


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.floats(-3, 3), st.floats(-3, 3))
def test_feature_block_is_affine_in_x(seed, a, b):
    rng = np.random.default_rng(seed)
    p, _ = make_params()
    x1, x2 = rng.standard_normal((2, 3, 4, 2))
    f = lambda x: embed(x, 0, 0, p).data[:, :2] - p.b_F.data
    np.testing.assert_allclose(f(a * x1 + b * x2), a * f(x1) + b * f(x2), atol=1e-9)


def test_out_of_range_index_names_table_size():
    p, _ = make_params()
    with pytest.raises(IndexError, match=r"6.*6|size 6"):
        embed(np.zeros((3, 4, 2)), 6, 0, p)
    with pytest.raises(K.ShapeError):
        embed(np.zeros((3, 5, 2)), 0, 0, p)
