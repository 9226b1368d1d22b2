from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vars_ecg import numerics as nx
from vars_ecg.numerics import AdamState, Tensor, adam_step, finite_difference_check, make_rng

SEEDS = range(10)


# ------------------------------------------------------------- forward ops

def test_sigmoid_of_zero_is_half():
    assert nx.sigmoid(Tensor([0.0])).data.tolist() == [0.5]


def test_matmul_identity():
    M = make_rng(0).normal(size=(3, 3))
    np.testing.assert_array_equal(nx.matmul(np.eye(3), M).data, M)


def test_row_softmax_uniform():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[1.0, 1.0, 1.0]])).data, [[1 / 3] * 3], atol=1e-15)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(nx.ShapeError, match=r"matmul.*\(2, 3\).*\(2, 3\)"):
        nx.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_non_finite_output_raises():
    with pytest.raises(nx.NumericOverflowError):
        nx.exp(Tensor([1000.0]))


@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 6)), elements=st.floats(-50, 50)))
def test_softmax_rows_sum_to_one(a):
    s = nx.softmax_rows(a).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-12)


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-30, 30)))
def test_sigmoid_open_interval(a):
    s = nx.sigmoid(a).data
    assert np.all((s > 0) & (s < 1))


# ------------------------------------------------------------- backward

def test_backward_square():
    x = Tensor(3.0, requires_grad=True)
    nx.backward(nx.mul(x, x), [x])
    assert x.grad == pytest.approx(6.0)


def test_backward_sigmoid_at_zero():
    x = Tensor(0.0, requires_grad=True)
    nx.backward(nx.sigmoid(x), [x])
    assert x.grad == pytest.approx(0.25)


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(nx.ContractError):
        nx.backward(nx.mul(x, 2.0), [x])


def test_cosine_self_similarity_gradient_is_zero():
    u = make_rng(1).normal(size=(1, 5))

    def f(t):
        return nx.sum(nx.cosine_rows(t, t))

    x = Tensor(u, requires_grad=True)
    nx.backward(f(x), [x])
    np.testing.assert_allclose(x.grad, 0.0, atol=1e-12)
    # central-difference oracle agrees
    assert finite_difference_check(f, u) < 1e-6


def test_unused_param_gets_zero_grad():
    x = Tensor(np.ones(2), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    nx.backward(nx.sum(x), [x, y])
    np.testing.assert_array_equal(y.grad, [0.0, 0.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = nx.mul(x, 3.0)
    assert not y.requires_grad


def test_replay_is_bit_identical():
    def run():
        rng = make_rng(5)
        W = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        X = rng.normal(size=(6, 4))
        loss = nx.mean(nx.power(nx.relu(nx.matmul(X, W)), 2.0))
        nx.backward(loss, [W])
        return loss.data.tobytes(), W.grad.tobytes()
    assert run() == run()


# ------------------------------------------------------- finite differences

def test_fd_sum_of_squares():
    x = make_rng(2).normal(size=5)
    assert finite_difference_check(lambda t: nx.sum(nx.mul(t, t)), x) < 1e-6


def test_fd_rejects_non_finite():
    with pytest.raises(nx.NumericOverflowError):
        finite_difference_check(lambda t: nx.sum(nx.log(t)), np.array([1e-7, 1.0]), step=1e-5)


OPS = {
    "add": lambda t, c: nx.sum(nx.add(t, c)),
    "sub": lambda t, c: nx.sum(nx.sub(c, t)),
    "mul": lambda t, c: nx.sum(nx.mul(t, c)),
    "div": lambda t, c: nx.sum(nx.div(c, nx.add(nx.mul(t, t), 1.0))),
    "matmul": lambda t, c: nx.sum(nx.matmul(t, nx.transpose(c))),
    "sigmoid": lambda t, c: nx.sum(nx.mul(nx.sigmoid(t), c)),
    "relu": lambda t, c: nx.sum(nx.mul(nx.relu(t), c)),
    "exp": lambda t, c: nx.sum(nx.exp(nx.scale(t, 0.3))),
    "log": lambda t, c: nx.sum(nx.log(nx.add(nx.mul(t, t), 1.0))),
    "power": lambda t, c: nx.sum(nx.power(nx.add(nx.mul(t, t), 0.5), 1.5)),
    "softmax": lambda t, c: nx.sum(nx.mul(nx.softmax_rows(t), c)),
    "log_softmax": lambda t, c: nx.sum(nx.mul(nx.log_softmax_rows(t), c)),
    "logsumexp": lambda t, c: nx.sum(nx.logsumexp_rows(t, np.arange(3) != np.argmin(c, axis=1)[:, None])),
    "log_sigmoid": lambda t, c: nx.sum(nx.log_sigmoid(t)),
    "bce": lambda t, c: nx.mean(nx.bce_with_logits(t, (c > 0).astype(float))),
    "l2_normalize": lambda t, c: nx.sum(nx.mul(nx.l2_normalize_rows(t), c)),
    "cosine": lambda t, c: nx.sum(nx.cosine_rows(t, c)),
    "mean_rows": lambda t, c: nx.sum(nx.mul(nx.mean_rows(t), c[0])),
    "take_rows": lambda t, c: nx.sum(nx.mul(nx.take_rows(t, [2, 0, 2]), c[:3])),
    "concat": lambda t, c: nx.sum(nx.mul(nx.concat([t, c], axis=0), nx.concat([c, t], axis=0))),
    "gather_scatter": lambda t, c: nx.sum(nx.mul(nx.scatter_matrix(nx.gather_matrix(t, [0, 1, 3], [1, 2, 0]),
                                                                   [0, 1, 3], [1, 2, 0], (4, 3)), c)),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradients_at_ten_seeds(name):
    for seed in SEEDS:
        rng = make_rng(seed, "op", name)
        x = rng.normal(size=(4, 3))
        c = rng.normal(size=(4, 3))
        err = finite_difference_check(lambda t: OPS[name](t, c), x)
        assert err < 1e-4, f"{name} seed {seed}: rel err {err}"


# ------------------------------------------------------------------ Adam

def test_adam_first_step_oracle():
    p = Tensor(np.zeros(4), requires_grad=True)
    st_ = AdamState(learning_rate=1e-3)
    adam_step(st_, {"p": p}, {"p": np.ones(4)})
    # hand recurrence: m = 0.1, v = 0.001, m_hat = 1, v_hat = 1
    expected = -1e-3 * 1.0 / (1.0 + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=0, atol=1e-15)


def test_adam_zero_gradient_leaves_params():
    p = Tensor(np.arange(3.0), requires_grad=True)
    adam_step(AdamState(), {"p": p}, {"p": np.zeros(3)})
    np.testing.assert_array_equal(p.data, np.arange(3.0))


def test_adam_shape_mismatch():
    p = Tensor(np.zeros(3), requires_grad=True)
    with pytest.raises(nx.ShapeError):
        adam_step(AdamState(), {"p": p}, {"p": np.zeros(4)})


def test_adam_deterministic():
    outs = []
    for _ in range(2):
        p = Tensor(np.ones(3), requires_grad=True)
        s = AdamState()
        for g in ([1.0, -2.0, 0.5], [0.3, 0.3, -1.0]):
            adam_step(s, {"p": p}, {"p": np.array(g)})
        outs.append(p.data.tobytes())
    assert outs[0] == outs[1]


# ------------------------------------------------------------------- RNG

def test_rng_streams_are_keyed():
    a = make_rng(3, "x", 1).normal(size=4)
    b = make_rng(3, "x", 1).normal(size=4)
    c = make_rng(3, "x", 2).normal(size=4)
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)
    assert isinstance(make_rng(3).bit_generator, np.random.Philox)
