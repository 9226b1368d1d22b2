"""GIN encoder/decoder, node masking and the scaled cosine reconstruction error."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import numerics as nx
from .graphcon import EcgGraph
from .model import EncoderState, GinLayerParams
from .numerics import Tensor


@dataclass(frozen=True)
class MaskPlan:
    masked: tuple[int, ...]
    rate: float

    def __len__(self) -> int:
        return len(self.masked)


def mask_count(rate: float, n: int) -> int:
    """round(rate * n), halves rounded up, floored at one node."""
    return max(1, int(math.floor(rate * n + 0.5 + 1e-9)))


def mask_nodes(X, rate: float, rng: np.random.Generator, mask_token: Tensor) -> tuple[Tensor, MaskPlan]:
    """Replace a uniformly sampled subset of rows by the mask token."""
    if not 0.0 < rate < 1.0:
        raise ValueError(f"mask rate must lie in (0, 1), got {rate}")
    X = nx.as_tensor(X)
    n = X.shape[0]
    if n < 1:
        raise ValueError("cannot mask an empty graph")
    k = min(mask_count(rate, n), n)
    chosen = np.sort(rng.choice(n, size=k, replace=False))
    ind = np.zeros((n, 1))
    ind[chosen] = 1.0
    token_rows = nx.mul(ind, nx.reshape(mask_token, (1, -1)))
    X_tilde = nx.add(nx.mul(X, 1.0 - ind), token_rows)
    return X_tilde, MaskPlan(tuple(int(i) for i in chosen), rate)


def propagation_matrix(A, aggregation: str = "sum") -> Tensor:
    """Neighbour weights used by GIN: A itself, or A with rows scaled to sum to one."""
    A = nx.as_tensor(A)
    if aggregation == "sum":
        return A
    if aggregation != "mean":
        raise ValueError(f"unknown aggregation {aggregation!r}")
    deg = nx.sum(A, axis=1)
    safe = nx.add(deg, (deg.data == 0).astype(np.float64))  # isolated rows stay zero
    return nx.div(A, nx.reshape(safe, (-1, 1)))


def gin_forward(layers: Sequence[GinLayerParams], A, H_in, final_activation: bool = False,
                aggregation: str = "sum") -> Tensor:
    """Stacked GIN updates h'_i = MLP((1 + eps) h_i + sum_j A_ij h_j).

    With ``aggregation="mean"`` the neighbour sum uses row-normalized weights
    A_ij / sum_k A_ik. ReLU separates consecutive layers; the last layer's
    output is linear unless ``final_activation``.
    """
    H = nx.as_tensor(H_in)
    A = nx.as_tensor(A)
    n = H.shape[0]
    if A.shape != (n, n):
        raise nx.ShapeError(f"gin_forward: adjacency {A.shape} does not match {n} nodes")
    P = propagation_matrix(A, aggregation)
    for i, layer in enumerate(layers):
        if H.shape[1] != layer.in_dim:
            raise nx.ShapeError(f"gin_forward: layer {i} expects dim {layer.in_dim}, got {H.shape[1]}")
        agg = nx.add(nx.mul(H, nx.add(1.0, layer.eps)), nx.matmul(P, H))
        hid = nx.relu(nx.add(nx.matmul(agg, layer.w1), layer.b1))
        H = nx.add(nx.matmul(hid, layer.w2), layer.b2)
        if i < len(layers) - 1 or final_activation:
            H = nx.relu(H)
    return H


def encode_features(X, A, state: EncoderState) -> tuple[Tensor, Tensor]:
    H = gin_forward(state.encoder, A, X, aggregation=state.aggregation)
    return H, nx.mean_rows(H)


def encode(graph: EcgGraph, state: EncoderState) -> tuple[Tensor, Tensor]:
    """Node embeddings H and the mean-pooled graph embedding z."""
    return encode_features(graph.X, graph.adjacency(), state)


def reconstruct(graph: EcgGraph, state: EncoderState, rate: float,
                rng: np.random.Generator) -> tuple[Tensor, MaskPlan, Tensor]:
    A = graph.adjacency()
    X_tilde, plan = mask_nodes(graph.X, rate, rng, state.mask_token)
    H_masked = gin_forward(state.encoder, A, X_tilde, aggregation=state.aggregation)
    X_rec = gin_forward(state.decoder, A, H_masked, aggregation=state.aggregation)
    return X_rec, plan, H_masked


def scaled_cosine_error(X, X_rec, plan: MaskPlan, gamma: float = 2.0) -> Tensor:
    """Mean over masked nodes of (1 - cos(x_i, x_rec_i)) ** gamma.

    A zero-norm row on either side counts as cosine 0 and warns.
    """
    if gamma < 1:
        raise ValueError("gamma must be >= 1")
    if len(plan) == 0:
        raise ValueError("mask plan is empty")
    idx = np.asarray(plan.masked)
    x = nx.take_rows(X, idx)
    xr = nx.take_rows(X_rec, idx)
    if np.any(np.linalg.norm(x.data, axis=1) == 0) or np.any(np.linalg.norm(xr.data, axis=1) == 0):
        warnings.warn("scaled_cosine_error: zero-norm row treated as cosine 0", RuntimeWarning, stacklevel=2)
    # rounding can push cos a hair past +-1
    err = nx.clip(nx.sub(1.0, nx.cosine_rows(x, xr)), 0.0, 2.0)
    return nx.mean(nx.power(err, gamma))
