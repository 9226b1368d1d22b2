"""Attention-derived adjacency over time-interval nodes."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .model import AttentionParams
from .numerics import Tensor
from .signal import EcgRecord, NodeFeatures, NodeMeta, PatchConfig, patch


@dataclass
class EcgGraph:
    X: np.ndarray  # (N, d)
    A: np.ndarray  # (N, N) weighted, zero diagonal
    node_meta: list[NodeMeta]
    theta_used: float
    record_id: str = ""
    duration_s: float = 0.0
    # differentiable view of A (same values) when built with gradients on
    A_tensor: Tensor | None = None

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Row-major (source, target) indices of nonzero entries of A."""
        r, c = np.nonzero(self.A)
        return r, c

    def adjacency(self) -> Tensor | np.ndarray:
        return self.A_tensor if self.A_tensor is not None else self.A

    def to_json(self) -> dict:
        return {"record_id": self.record_id, "theta_used": self.theta_used,
                "n_nodes": self.n_nodes, "node_meta": [m.to_dict() for m in self.node_meta],
                "A": self.A.reshape(-1).tolist()}

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n")


def attention_scores(X, params: AttentionParams) -> Tensor:
    """Head-averaged sigmoid(X Q_e (X K_e)^T / sqrt(d_k))."""
    X = nx.as_tensor(X)
    d = X.shape[1]
    if params.q[0].shape[0] != d:
        raise nx.ShapeError(f"attention_scores: features have dim {d}, projections expect {params.q[0].shape[0]}")
    if d % params.num_heads:
        raise ValueError(f"feature dim {d} is not divisible by num_heads={params.num_heads}")
    inv = 1.0 / math.sqrt(params.d_k)
    heads = []
    for qw, kw in zip(params.q, params.k):
        logits = nx.matmul(nx.matmul(X, qw), nx.transpose(nx.matmul(X, kw)))
        heads.append(nx.sigmoid(nx.scale(logits, inv)))
    total = heads[0]
    for h in heads[1:]:
        total = nx.add(total, h)
    return nx.scale(total, 1.0 / len(heads))


def _offdiag(W: np.ndarray) -> np.ndarray:
    n = W.shape[0]
    return W[~np.eye(n, dtype=bool)]


def quantile_threshold(W: np.ndarray, q: float) -> float:
    """Lower empirical q-quantile of the off-diagonal entries.

    Sorting the M off-diagonal values ascending, the threshold is the entry at
    index floor(q * M), so ``>=`` keeps ceil((1 - q) * M) entries when all are
    distinct.
    """
    vals = np.sort(_offdiag(W))
    if vals.size == 0:
        return 0.0
    k = min(int(math.floor(q * vals.size + 1e-9)), vals.size - 1)
    return float(vals[k])


def threshold_adjacency(W, q: float = 0.75) -> tuple[np.ndarray, float]:
    """Zero entries below the per-graph q-quantile; ties at the threshold are kept."""
    if not 0.0 <= q < 1.0:
        raise ValueError(f"filter quantile must lie in [0, 1), got {q}")
    W = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    theta = quantile_threshold(W, q)
    A = np.where(W >= theta, W, 0.0)
    np.fill_diagonal(A, 0.0)
    return A, theta


def topk_adjacency(W, k: int) -> tuple[np.ndarray, float]:
    """Keep the k highest-scoring out-edges of every node (self-loops excluded)."""
    W = W.data if isinstance(W, Tensor) else np.asarray(W, dtype=np.float64)
    n = W.shape[0]
    if k < 1:
        raise ValueError("top-k needs k >= 1")
    scores = W.copy()
    np.fill_diagonal(scores, -np.inf)
    k = min(k, max(n - 1, 0))
    A = np.zeros_like(W)
    if k == 0:
        return A, 0.0
    order = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    rows = np.repeat(np.arange(n), k)
    cols = order.reshape(-1)
    A[rows, cols] = W[rows, cols]
    return A, float(W[rows, cols].min())


@dataclass(frozen=True)
class GraphConfig:
    interval_len: int = 40
    q: float = 0.75
    sparsifier: str = "quantile"  # or "topk"
    topk: int = 8
    normalize: bool = True


def graph_from_features(feats: NodeFeatures, cfg: GraphConfig, params: AttentionParams,
                        record_id: str = "", duration_s: float = 0.0,
                        differentiable: bool = False) -> EcgGraph:
    """Attention scores -> sparsify, on already patched node features.

    With ``differentiable`` the retained weights stay attached to the
    attention parameters; the keep/drop mask itself is a constant.
    """
    if differentiable:
        W = attention_scores(feats.X, params)
    else:
        with nx.no_grad():
            W = attention_scores(feats.X, params)
    if cfg.sparsifier == "topk":
        A, theta = topk_adjacency(W, cfg.topk)
    elif cfg.sparsifier == "quantile":
        A, theta = threshold_adjacency(W, cfg.q)
    else:
        raise ValueError(f"unknown sparsifier {cfg.sparsifier!r}")
    A_t = nx.mul(W, (A != 0).astype(np.float64)) if differentiable else None
    return EcgGraph(feats.X, A, feats.node_meta, theta, record_id, duration_s, A_t)


def build_graph(record: EcgRecord, cfg: GraphConfig, params: AttentionParams,
                differentiable: bool = False) -> EcgGraph:
    """normalize -> patch -> attention scores -> sparsify."""
    feats = patch(record, PatchConfig(cfg.interval_len, cfg.normalize))
    return graph_from_features(feats, cfg, params, record.record_id, record.duration_s, differentiable)
