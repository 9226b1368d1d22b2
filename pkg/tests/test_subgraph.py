from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vars_ecg import numerics as nx
from vars_ecg.graphcon import EcgGraph
from vars_ecg.model import SubgraphParams
from vars_ecg.numerics import Tensor, finite_difference_check, make_rng
from vars_ecg.subgraph import edge_scores, extract_subgraph, gates, jse_loss, sample_cond


def _graph(n=6, seed=0) -> EcgGraph:
    rng = make_rng(seed, "g")
    A = rng.random((n, n)) * (rng.random((n, n)) < 0.7)
    np.fill_diagonal(A, 0.0)
    return EcgGraph(rng.normal(size=(n, 4)), A, [], 0.0)


def test_laplace_moments():
    x = sample_cond(make_rng(0), 100_000)
    assert abs(x.mean()) < 0.02
    assert abs(x.var() - 2.0) < 0.05


def test_sample_cond_seeded():
    np.testing.assert_array_equal(sample_cond(make_rng(4), 7), sample_cond(make_rng(4), 7))
    with pytest.raises(ValueError):
        sample_cond(make_rng(4), 0)


@given(st.integers(0, 2**31), st.integers(2, 8))
def test_edge_scores_in_open_interval(seed, n):
    rng = make_rng(seed)
    params = SubgraphParams.init(5, 3, rng)
    H = rng.normal(size=(n, 5))
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    w = edge_scores(H, rows, cols, rng.normal(size=3), params).data
    assert w.shape == (rows.size,) and np.all((w > 0) & (w < 1))


def test_zero_condition_gives_half_gate():
    params = SubgraphParams.init(5, 3, make_rng(0))
    g_src, g_dst = gates(np.zeros(3), params)
    np.testing.assert_array_equal(g_src.data, 0.5)
    np.testing.assert_array_equal(g_dst.data, 0.5)


def test_scores_match_concatenated_form():
    rng = make_rng(1)
    h, c = 4, 3
    params = SubgraphParams.init(h, c, rng)
    H = rng.normal(size=(5, h))
    p = rng.normal(size=c)
    rows, cols = np.array([0, 1, 4]), np.array([2, 0, 3])
    # oracle: MLP([z_i; z_j] * sigmoid(f_g(p))) with the halves glued back together
    W1 = np.vstack([params.w1_src.data, params.w1_dst.data])
    Wg = np.hstack([params.fg_w_src.data, params.fg_w_dst.data])
    bg = np.concatenate([params.fg_b_src.data, params.fg_b_dst.data])
    gate = 1 / (1 + np.exp(-(p @ Wg + bg)))
    want = []
    for i, j in zip(rows, cols):
        x = np.concatenate([H[i], H[j]]) * gate
        hid = np.maximum(x @ W1 + params.b1.data, 0)
        want.append(1 / (1 + np.exp(-(hid @ params.w2.data[:, 0] + params.b2.data[0]))))
    np.testing.assert_allclose(edge_scores(H, rows, cols, p, params).data, want, atol=1e-14)
    # chunked no-grad path agrees
    np.testing.assert_allclose(edge_scores(H, rows, cols, p, params, chunk=2).data, want, atol=1e-14)


def test_scoring_is_directed():
    rng = make_rng(2)
    params = SubgraphParams.init(4, 3, rng)
    H = rng.normal(size=(2, 4))
    w = edge_scores(H, np.array([0, 1]), np.array([1, 0]), rng.normal(size=3), params).data
    assert abs(w[0] - w[1]) > 1e-6


def test_edge_scores_errors():
    params = SubgraphParams.init(4, 3, make_rng(0))
    with pytest.raises(ValueError):
        edge_scores(np.ones((2, 4)), np.array([], int), np.array([], int), np.zeros(3), params)
    with pytest.raises(nx.ShapeError):
        edge_scores(np.ones((2, 5)), np.array([0]), np.array([1]), np.zeros(3), params)
    with pytest.raises(nx.ShapeError):
        edge_scores(np.ones((2, 4)), np.array([0]), np.array([1]), np.zeros(2), params)


def test_extract_subgraph_thresholds():
    g = _graph()
    rows, cols = g.edges()
    w = make_rng(3).random(rows.size)
    assert extract_subgraph(g, w, 0.0).n_edges == rows.size
    strict = np.clip(w, 1e-6, 1 - 1e-6)
    assert extract_subgraph(g, strict, 1.0).n_edges == 0
    view = extract_subgraph(g, w, 0.8)
    brute = {(int(r), int(c)) for r, c, s in zip(rows, cols, w) if s >= 0.8}
    assert set(zip(view.rows.tolist(), view.cols.tolist())) == brute
    for r, c in brute:
        assert view.A[r, c] == g.A[r, c]
    assert np.count_nonzero(view.A) == len(brute)


def test_straight_through_forward_and_gradient():
    g = _graph()
    rows, cols = g.edges()
    w = Tensor(make_rng(4).random(rows.size), requires_grad=True)
    view = extract_subgraph(g, w, 0.5, rows, cols, straight_through=True)
    np.testing.assert_array_equal(view.adjacency().data, view.A)
    nx.backward(nx.sum(view.adjacency()), [w])
    # d/dw of sum(A_parent * hard(w)) passes straight through as the parent weight
    np.testing.assert_allclose(w.grad, g.A[rows, cols])


def test_extract_rejects_bad_delta():
    with pytest.raises(ValueError):
        extract_subgraph(_graph(), np.zeros(1), 1.5)


# ------------------------------------------------------------------- JSE

def test_jse_zero_embeddings():
    v = jse_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(3)).item()
    assert v == pytest.approx(2 * math.log(2), abs=1e-12)
    assert v == pytest.approx(1.3863, abs=1e-4)
    assert jse_loss(np.zeros((2, 3)), np.zeros((2, 3)), np.ones(3), sign="paper").item() == pytest.approx(-v)


def test_jse_aligned_limit():
    # positives strongly aligned, the only negatives strongly anti-aligned
    H = np.array([[20.0, 0], [-20.0, 0]])
    assert 0 < jse_loss(H, H, np.ones(2)).item() < 1e-6


def test_jse_needs_two():
    with pytest.raises(ValueError):
        jse_loss(np.ones((1, 3)), np.ones((1, 3)), np.ones(3))


def test_jse_projects_condition_through_fg():
    rng = make_rng(0)
    params = SubgraphParams.init(4, 7, rng)
    v = jse_loss(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)), rng.normal(size=7), params)
    assert np.isfinite(v.item())
    with pytest.raises(nx.ShapeError):
        jse_loss(np.ones((3, 4)), np.ones((3, 4)), np.ones(7))


def _jse_oracle(Hg, Hs, p):
    L = Hg.shape[0]
    S = (Hg * p) @ (Hs * p).T
    # log sigma(s) = -log(1 + e^-s), log(1 - sigma(s)) = -log(1 + e^s)
    pos = np.mean([-np.logaddexp(0.0, -S[i, i]) for i in range(L)])
    neg = np.mean([-np.logaddexp(0.0, S[i, j]) for i in range(L) for j in range(L) if i != j])
    return -(pos + neg)


def test_jse_matches_brute_force():
    rng = make_rng(6)
    for _ in range(5):
        Hg, Hs, p = rng.normal(size=(4, 3)), rng.normal(size=(4, 3)), rng.normal(size=3)
        assert jse_loss(Hg, Hs, p).item() == pytest.approx(_jse_oracle(Hg, Hs, p), abs=1e-12)


def test_jse_gradcheck_ten_seeds():
    for seed in range(10):
        rng = make_rng(seed, "jse")
        Hg, p = rng.normal(size=(4, 5)), rng.normal(size=5)
        assert finite_difference_check(lambda t: jse_loss(Hg, t, p), rng.normal(size=(4, 5))) < 1e-4
        assert finite_difference_check(lambda t: jse_loss(t, Hg, p), rng.normal(size=(4, 5))) < 1e-4


def test_edge_score_gradcheck_ten_seeds():
    for seed in range(10):
        rng = make_rng(seed, "es")
        params = SubgraphParams.init(4, 3, rng)
        rows, cols = np.array([0, 1, 2, 2]), np.array([1, 2, 0, 1])
        p = rng.normal(size=3)
        f = lambda t: nx.sum(nx.mul(edge_scores(t, rows, cols, p, params), np.arange(1.0, 5.0)))  # noqa: E731
        assert finite_difference_check(f, rng.normal(size=(3, 4))) < 1e-4
