"""Downstream classifier over frozen graph embeddings."""
from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from . import numerics as nx
from .encoder import encode
from .graphcon import EcgGraph, build_graph
from .metrics import MetricsReport, compute_metrics
from .model import ClassifierHead
from .numerics import AdamState, Tensor, adam_step, make_rng
from .signal import EcgRecord
from .train import Checkpoint


class MissingHeadError(RuntimeError):
    """The checkpoint carries no classifier head."""


def graph_embedding(ckpt: Checkpoint, record: EcgRecord) -> tuple[EcgGraph, np.ndarray]:
    with nx.no_grad():
        g = build_graph(record, ckpt.config.graph, ckpt.state.attention)
        _, z = encode(g, ckpt.state.encoder)
    return g, z.data.copy()


def embed_dataset(ckpt: Checkpoint, records: Sequence[EcgRecord]) -> np.ndarray:
    return np.stack([graph_embedding(ckpt, r)[1] for r in records])


def label_matrix(records: Sequence[EcgRecord], num_classes: int, mode: str) -> np.ndarray:
    """Class ids (single) or a 0/1 indicator matrix (multi)."""
    if mode == "single":
        y = []
        for r in records:
            lab = r.label
            if isinstance(lab, tuple):
                if len(lab) != 1:
                    raise ValueError(f"{r.record_id}: single-label mode needs exactly one label, got {lab}")
                lab = lab[0]
            if lab is None:
                raise ValueError(f"{r.record_id}: record has no label")
            if not 0 <= lab < num_classes:
                raise ValueError(f"{r.record_id}: label id {lab} >= num_classes {num_classes}")
            y.append(lab)
        return np.asarray(y, dtype=np.int64)
    Y = np.zeros((len(records), num_classes))
    for i, r in enumerate(records):
        if r.label is None:
            raise ValueError(f"{r.record_id}: record has no label")
        labs = r.label if isinstance(r.label, tuple) else (r.label,)
        for lab in labs:
            if not 0 <= lab < num_classes:
                raise ValueError(f"{r.record_id}: label id {lab} >= num_classes {num_classes}")
            Y[i, lab] = 1.0
    return Y


def head_logits(head: ClassifierHead, Z) -> Tensor:
    Z = nx.as_tensor(Z)
    Zs = nx.div(nx.sub(Z, head.in_mean), head.in_std)
    hid = nx.relu(nx.add(nx.matmul(Zs, head.w1), head.b1))
    return nx.add(nx.matmul(hid, head.w2), head.b2)


def head_loss(head: ClassifierHead, Z, y) -> Tensor:
    """Mean cross-entropy (single) or mean per-class BCE (multi)."""
    logits = head_logits(head, Z)
    if head.mode == "single":
        y = np.asarray(y, dtype=np.int64)
        onehot = np.zeros(logits.shape)
        onehot[np.arange(len(y)), y] = 1.0
        return nx.scale(nx.sum(nx.mul(nx.log_softmax_rows(logits), onehot)), -1.0 / len(y))
    return nx.mean(nx.bce_with_logits(logits, y))


def train_head(Z: np.ndarray, y: np.ndarray, num_classes: int, mode: str, epochs: int,
               lr: float, seed: int) -> ClassifierHead:
    """Full-batch Adam on a fresh head; embeddings are standardized per feature."""
    head = ClassifierHead.init(Z.shape[1], num_classes, make_rng(seed, "head"), mode)
    head.in_mean = Z.mean(axis=0)
    sd = Z.std(axis=0)
    head.in_std = np.where(sd > 1e-12, sd, 1.0)
    params = dict(head.named())
    adam = AdamState(learning_rate=lr)
    for _ in range(epochs):
        for p in params.values():
            p.grad = None
        loss = head_loss(head, Z, y)
        nx.backward(loss, params.values())
        adam_step(adam, params)
    for p in params.values():
        p.grad = None
    return head


def fit_head(ckpt: Checkpoint, records: Sequence[EcgRecord]) -> Checkpoint:
    """Train a classifier on frozen embeddings; the input checkpoint is left untouched."""
    cfg = ckpt.config
    y = label_matrix(records, cfg.num_classes, cfg.classifier_mode)
    Z = embed_dataset(ckpt, records)
    head = train_head(Z, y, cfg.num_classes, cfg.classifier_mode, cfg.head_epochs, cfg.head_lr, cfg.seed)
    out = copy.deepcopy(ckpt)
    out.state.head = head
    return out


def probabilities_from_embedding(head: ClassifierHead, z: np.ndarray) -> np.ndarray:
    with nx.no_grad():
        logits = head_logits(head, np.atleast_2d(z))
    if head.mode == "single":
        return nx.softmax_rows(logits).data[0]
    return nx.sigmoid(logits).data[0]


def predict(ckpt: Checkpoint, record: EcgRecord) -> np.ndarray:
    """Class probabilities: softmax (single-label) or independent sigmoids (multi-label)."""
    if ckpt.state.head is None:
        raise MissingHeadError("checkpoint has no classifier head; run fit first")
    _, z = graph_embedding(ckpt, record)
    return probabilities_from_embedding(ckpt.state.head, z)


def predict_many(ckpt: Checkpoint, records: Sequence[EcgRecord]) -> np.ndarray:
    if ckpt.state.head is None:
        raise MissingHeadError("checkpoint has no classifier head; run fit first")
    return np.stack([predict(ckpt, r) for r in records])


def evaluate(ckpt: Checkpoint, records: Sequence[EcgRecord]) -> tuple[np.ndarray, list[MetricsReport]]:
    """Predictions plus metrics over all classes and over the risk classes (every id but 0)."""
    cfg = ckpt.config
    P = predict_many(ckpt, records)
    y = label_matrix(records, cfg.num_classes, cfg.classifier_mode)
    reports = [compute_metrics(P, y, cfg.classifier_mode, scope="all"),
               compute_metrics(P, y, cfg.classifier_mode, classes=range(1, cfg.num_classes), scope="risk")]
    return P, reports
