from __future__ import annotations

import csv
import dataclasses
import io
import itertools

import numpy as np
import pytest
from helpers import random_record, small_config
from hypothesis import given
from hypothesis import strategies as st

from vars_ecg.classify import (MissingHeadError, fit_head, head_logits, head_loss, label_matrix, predict,
                               predict_many, train_head)
from vars_ecg.metrics import CSV_COLUMNS, binary_auc, compute_metrics, metrics_csv
from vars_ecg.model import ClassifierHead
from vars_ecg.numerics import finite_difference_check, make_rng
from vars_ecg.signal import EcgRecord
from vars_ecg.train import pretrain


def _separable(n=60, h=6, C=3, seed=0):
    rng = make_rng(seed)
    y = np.arange(n) % C
    centers = 4.0 * np.eye(C, h)
    return centers[y] + 0.3 * rng.normal(size=(n, h)), y


def test_separable_fixture_reaches_full_training_accuracy():
    Z, y = _separable()
    head = train_head(Z, y, 3, "single", epochs=200, lr=1e-2, seed=0)
    pred = head_logits(head, Z).data.argmax(axis=1)
    assert (pred == y).mean() == 1.0


def test_multilabel_head_separable():
    Z, y = _separable(C=2)
    Y = np.stack([y == 0, y == 1, np.ones_like(y, dtype=bool)], axis=1).astype(float)
    head = train_head(Z, Y, 3, "multi", epochs=200, lr=1e-2, seed=0)
    P = 1 / (1 + np.exp(-head_logits(head, Z).data))
    assert np.all((P >= 0.5) == Y.astype(bool))


def test_head_loss_gradcheck_ten_seeds():
    for seed in range(10):
        rng = make_rng(seed, "head")
        for mode in ("single", "multi"):
            head = ClassifierHead.init(5, 3, rng, mode)
            y = rng.integers(0, 3, size=6) if mode == "single" else (rng.random((6, 3)) < 0.5).astype(float)
            err = finite_difference_check(lambda t: head_loss(head, t, y), rng.normal(size=(6, 5)))
            assert err < 1e-4
            Z = rng.normal(size=(6, 5))
            for name, param in head.named():
                err = finite_difference_check(
                    lambda t, name=name: head_loss(dataclasses.replace(head, **{name: t}), Z, y), param.data)
                assert err < 1e-4, (mode, name)


def test_label_errors():
    rec = EcgRecord(np.ones((1, 80)), 100, "x", 5)
    with pytest.raises(ValueError, match="x.*num_classes"):
        label_matrix([rec], 3, "single")
    with pytest.raises(ValueError, match="no label"):
        label_matrix([EcgRecord(np.ones((1, 80)), 100, "y")], 3, "multi")
    Y = label_matrix([EcgRecord(np.ones((1, 80)), 100, "z", (0, 2))], 3, "multi")
    np.testing.assert_array_equal(Y, [[1, 0, 1]])


@pytest.fixture(scope="module")
def tiny_ckpt(tiny_dataset):
    return pretrain(tiny_dataset, small_config(epochs=1))


def test_predict_requires_head(tiny_ckpt, tiny_dataset):
    with pytest.raises(MissingHeadError):
        predict(tiny_ckpt, tiny_dataset[0])


def test_fit_rejects_unknown_label(tiny_ckpt, tiny_dataset):
    bad = [EcgRecord(r.leads, r.sampling_rate_hz, r.record_id, 7) for r in tiny_dataset[:2]]
    with pytest.raises(ValueError):
        fit_head(tiny_ckpt, bad)


def test_predict_is_a_pure_function(tiny_ckpt, tiny_dataset):
    ckpt = fit_head(tiny_ckpt, tiny_dataset)
    assert tiny_ckpt.state.head is None  # input checkpoint untouched
    rec = tiny_dataset[3]
    twin = EcgRecord(rec.leads.copy(), rec.sampling_rate_hz, "twin", rec.label)
    a, b = predict(ckpt, rec), predict(ckpt, twin)
    assert a.tobytes() == b.tobytes()
    assert a.sum() == pytest.approx(1.0) and a.shape == (3,)
    other = random_record(make_rng(0), n_samples=1000)
    assert predict_many(ckpt, [rec, other]).shape == (2, 3)


def test_class0_records_mostly_predicted_normal(e2e):
    normals = [r for r in e2e.test if r.label == 0]
    hits = [predict(e2e.checkpoint, r).argmax() == 0 for r in normals]
    assert np.mean(hits) >= 0.9


# ---------------------------------------------------------------- metrics

def test_perfect_predictions():
    y = np.array([0, 1, 2, 2, 1, 0])
    rep = compute_metrics(np.eye(3)[y], y)
    for key in ("accuracy", "macro_precision", "macro_sensitivity", "macro_specificity", "macro_f1", "macro_auc"):
        assert getattr(rep, key) == 1.0, key


def test_auc_pair_counting():
    assert binary_auc(np.array([0.9, 0.8, 0.3, 0.2]), np.array([1, 0, 1, 0])) == 0.75


@given(st.lists(st.floats(0, 1), min_size=2, max_size=12), st.integers(0, 2**31))
def test_auc_matches_pair_oracle(scores, seed):
    pos = make_rng(seed).random(len(scores)) < 0.5
    s = np.asarray(scores)
    got = binary_auc(s, pos)
    if pos.all() or not pos.any():
        assert got is None
        return
    pairs = [(1.0 if a > b else 0.5 if a == b else 0.0) for a, b in itertools.product(s[pos], s[~pos])]
    assert got == pytest.approx(np.mean(pairs), abs=1e-12)


def test_random_scores_auc_half():
    rng = make_rng(0)
    y = np.repeat([0, 1], 5000)
    P = rng.random((10_000, 2))
    rep = compute_metrics(P / P.sum(axis=1, keepdims=True), rng.permutation(y))
    assert abs(rep.macro_auc - 0.5) < 0.02


def test_single_class_auc_undefined():
    rep = compute_metrics(np.array([[0.7, 0.3], [0.6, 0.4]]), np.array([0, 0]))
    assert rep.per_class[0].auc is None and rep.macro_auc is None
    row = list(csv.reader(io.StringIO(metrics_csv([rep]))))[1]
    assert row[CSV_COLUMNS.index("macro_auc")] == "NA"


@given(st.integers(2, 5), st.integers(1, 40), st.integers(0, 2**31))
def test_report_invariants(C, n, seed):
    rng = make_rng(seed)
    P = rng.random((n, C))
    y = rng.integers(0, C, size=n)
    rep = compute_metrics(P, y)
    np.testing.assert_array_equal(rep.confusion.sum(axis=1), np.bincount(y, minlength=C))
    for c, s in rep.per_class.items():
        assert s.support == int((y == c).sum())
    for v in (rep.accuracy, rep.macro_precision, rep.macro_sensitivity, rep.macro_specificity, rep.macro_f1):
        assert 0.0 <= v <= 1.0
    assert rep.macro_auc is None or 0.0 <= rep.macro_auc <= 1.0


def test_risk_subset_scores_only_its_classes():
    y = np.array([0, 0, 1, 2])
    P = np.eye(3)[[1, 1, 1, 2]]  # both normals wrong, both risks right
    rep = compute_metrics(P, y, classes=[1, 2], scope="risk")
    assert rep.accuracy == 1.0 and rep.n == 2
    assert rep.per_class[1].precision == pytest.approx(1 / 3)
    assert rep.macro_f1 == pytest.approx((0.5 + 1.0) / 2)


def test_multilabel_metrics():
    Y = np.array([[1, 0, 1], [0, 1, 0], [1, 1, 0]])
    rep = compute_metrics(Y * 0.9 + 0.05, Y, mode="multi")
    assert rep.accuracy == 1.0 and rep.subset_accuracy == 1.0 and rep.confusion is None
    P = Y.astype(float)
    P[0, 2] = 0.0
    rep = compute_metrics(P, Y, mode="multi")
    assert rep.subset_accuracy == pytest.approx(2 / 3)
    assert rep.accuracy == pytest.approx(8 / 9)


def test_metrics_errors():
    with pytest.raises(ValueError):
        compute_metrics(np.ones((2, 3)), np.array([0, 3]))
    with pytest.raises(ValueError):
        compute_metrics(np.ones((2, 3)), np.array([0]))
    with pytest.raises(ValueError):
        compute_metrics(np.ones((2, 3)), np.array([0, 1]), classes=[4])
