"""Feature subgraph module: conditioned edge scoring, delta-thresholded views, JSE loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .graphcon import EcgGraph
from .model import SubgraphParams
from .numerics import Tensor


def sample_cond(rng: np.random.Generator, cond_dim: int) -> np.ndarray:
    """i.i.d. Laplace(0, 1) conditioning vector."""
    if cond_dim < 1:
        raise ValueError("cond_dim must be >= 1")
    return rng.laplace(0.0, 1.0, size=cond_dim)


def gates(p, params: SubgraphParams) -> tuple[Tensor, Tensor]:
    """sigmoid(f_g(p)) split into the halves that multiply z_i and z_j."""
    p = nx.reshape(nx.as_tensor(p), (1, -1))
    if p.shape[1] != params.cond_dim:
        raise nx.ShapeError(f"conditioning vector has dim {p.shape[1]}, f_g expects {params.cond_dim}")
    g_src = nx.sigmoid(nx.add(nx.matmul(p, params.fg_w_src), params.fg_b_src))
    g_dst = nx.sigmoid(nx.add(nx.matmul(p, params.fg_w_dst), params.fg_b_dst))
    return g_src, g_dst


def edge_scores(H, rows, cols, p, params: SubgraphParams, chunk: int | None = None) -> Tensor:
    """w_ij = MLP([z_i; z_j] * sigmoid(f_g(p))) for each edge (rows[k], cols[k]).

    ``chunk`` bounds memory when scoring many edges without gradients.
    """
    H = nx.as_tensor(H)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    if rows.size == 0:
        raise ValueError("edge_scores: no edges")
    if H.shape[1] != params.hidden:
        raise nx.ShapeError(f"edge_scores: embeddings have dim {H.shape[1]}, scorer expects {params.hidden}")
    g_src, g_dst = gates(p, params)
    U = nx.matmul(nx.mul(H, g_src), params.w1_src)
    V = nx.matmul(nx.mul(H, g_dst), params.w1_dst)
    if chunk is not None and not H.requires_grad:
        out = np.empty(rows.size)
        w2 = params.w2.data[:, 0]
        for s in range(0, rows.size, chunk):
            r, c = rows[s:s + chunk], cols[s:s + chunk]
            hid = np.maximum(U.data[r] + V.data[c] + params.b1.data, 0.0)
            out[s:s + chunk] = hid @ w2 + params.b2.data[0]
        return nx.sigmoid(out)
    hid = nx.relu(nx.add(nx.add(nx.take_rows(U, rows), nx.take_rows(V, cols)), params.b1))
    logit = nx.add(nx.matmul(hid, params.w2), params.b2)
    return nx.sigmoid(nx.reshape(logit, (-1,)))


@dataclass
class SubgraphView:
    parent: EcgGraph
    rows: np.ndarray
    cols: np.ndarray
    scores: np.ndarray
    delta_used: float
    A: np.ndarray  # parent weights on retained edges
    A_tensor: Tensor | None = None

    @property
    def n_edges(self) -> int:
        return int(self.rows.size)

    def adjacency(self) -> Tensor | np.ndarray:
        return self.A_tensor if self.A_tensor is not None else self.A


def extract_subgraph(graph: EcgGraph, w, delta: float = 0.8, rows=None, cols=None,
                     straight_through: bool = False) -> SubgraphView:
    """Keep edges of ``graph`` whose score is at least ``delta``.

    ``w`` is aligned with ``graph.edges()`` unless explicit ``rows``/``cols``
    are given. With ``straight_through`` the view's adjacency carries the
    parent weights on kept edges in the forward pass while passing the score
    gradient through the hard mask.
    """
    if not 0.0 <= delta <= 1.0:
        raise ValueError(f"delta must lie in [0, 1], got {delta}")
    if rows is None:
        rows, cols = graph.edges()
    w_t = nx.as_tensor(w)
    keep = w_t.data >= delta
    n = graph.n_nodes
    A = np.zeros((n, n))
    A[rows[keep], cols[keep]] = graph.A[rows[keep], cols[keep]]
    A_t = None
    if straight_through and rows.size:
        hard = keep.astype(np.float64)
        st = nx.add(nx.sub(w_t, w_t.data), hard)  # value == hard, d/dw == 1
        parent_w = nx.gather_matrix(graph.adjacency(), rows, cols)
        A_t = nx.scatter_matrix(nx.mul(parent_w, st), rows, cols, (n, n))
    return SubgraphView(graph, rows[keep], cols[keep], w_t.data[keep], delta, A, A_t)


def project_cond(p, hidden: int, params: SubgraphParams | None) -> Tensor:
    """Bring the conditioning vector to embedding width, through f_g if needed."""
    p = nx.as_tensor(p)
    if p.size == hidden:
        return nx.reshape(p, (1, -1))
    if params is None:
        raise nx.ShapeError(f"conditioning dim {p.size} differs from embedding dim {hidden} and no f_g given")
    return nx.add(nx.matmul(nx.reshape(p, (1, -1)), params.fg_w_src), params.fg_b_src)


def jse_loss(H_graph, H_sub, p, params: SubgraphParams | None = None, sign: str = "corrected") -> Tensor:
    """Jensen-Shannon estimator over L graph/subgraph embedding pairs.

    The bracketed objective is mean log sigma(pos) + mean log(1 - sigma(neg)),
    where pairs are scored by (p * H_i)(p * H_j,theta)^T. ``sign="corrected"``
    returns its negation so minimizing raises positive-pair agreement;
    ``sign="paper"`` returns the bracket as written.
    """
    H_graph, H_sub = nx.as_tensor(H_graph), nx.as_tensor(H_sub)
    if H_graph.shape != H_sub.shape:
        raise nx.ShapeError(f"jse_loss: embedding shapes differ {H_graph.shape} vs {H_sub.shape}")
    L, h = H_graph.shape
    if L < 2:
        raise ValueError("jse_loss needs at least 2 samples")
    if sign not in ("corrected", "paper"):
        raise ValueError(f"unknown jse sign mode {sign!r}")
    pv = project_cond(p, h, params)
    a = nx.mul(H_graph, pv)
    b = nx.mul(H_sub, pv)
    S = nx.matmul(a, nx.transpose(b))
    eye = np.eye(L)
    # log sigma(s) and log(1 - sigma(s)) = log sigma(-s), evaluated without forming sigma
    pos = nx.scale(nx.sum(nx.mul(nx.log_sigmoid(S), eye)), 1.0 / L)
    neg = nx.scale(nx.sum(nx.mul(nx.log_sigmoid(nx.scale(S, -1.0)), 1.0 - eye)), 1.0 / (L * L - L))
    bracket = nx.add(pos, neg)
    return nx.scale(bracket, -1.0) if sign == "corrected" else bracket
