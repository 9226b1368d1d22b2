"""NT-Xent over reconstruction/subgraph views and the weighted training objective."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .numerics import Tensor


@dataclass(frozen=True)
class LossWeights:
    rec: float = 1.0
    jse: float = 1.0
    cl: float = 1.0

    def __post_init__(self):
        if min(self.rec, self.jse, self.cl) < 0:
            raise ValueError("loss weights must be nonnegative")


def nt_xent(Z_r, Z_s, temperature: float = 0.5) -> Tensor:
    """Contrastive loss anchored on the reconstruction views.

    For anchor i the pool is all 2L rows of [Z_r; Z_s] except the anchor
    itself; the positive is Z_s[i]. Similarity is cosine. Zero-norm rows
    raise ``ContractError``.
    """
    Z_r, Z_s = nx.as_tensor(Z_r), nx.as_tensor(Z_s)
    if Z_r.shape != Z_s.shape or Z_r.ndim != 2:
        raise nx.ShapeError(f"nt_xent: view shapes {Z_r.shape} and {Z_s.shape} must match")
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    L = Z_r.shape[0]
    if L < 1:
        raise ValueError("nt_xent needs at least one pair")
    pool = nx.l2_normalize_rows(nx.concat([Z_r, Z_s], axis=0))
    anchors = nx.l2_normalize_rows(Z_r)
    sims = nx.scale(nx.matmul(anchors, nx.transpose(pool)), 1.0 / temperature)  # L x 2L
    not_self = np.ones((L, 2 * L), dtype=bool)
    not_self[np.arange(L), np.arange(L)] = False
    positive = np.zeros((L, 2 * L))
    positive[np.arange(L), L + np.arange(L)] = 1.0
    per_anchor = nx.sub(nx.logsumexp_rows(sims, not_self), nx.sum(nx.mul(sims, positive), axis=1))
    return nx.mean(per_anchor)


def total_loss(l_rec, l_jse, l_cl, weights: LossWeights = LossWeights()) -> Tensor:
    """Weighted sum; a zero weight drops its term from the graph entirely."""
    terms = [(weights.rec, l_rec), (weights.jse, l_jse), (weights.cl, l_cl)]
    out = nx.Tensor(0.0)
    for lam, term in terms:
        if lam != 0.0:
            out = nx.add(out, nx.scale(term, lam))
    return out
