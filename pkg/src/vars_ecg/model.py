"""Learnable parameter containers and their initialization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator

import numpy as np

from .numerics import Tensor


def _glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=(fan_in, fan_out)), requires_grad=True)


def _zeros(*shape: int) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


@dataclass
class AttentionParams:
    q: list[Tensor]  # per head, d x d_k
    k: list[Tensor]

    @property
    def num_heads(self) -> int:
        return len(self.q)

    @property
    def d_k(self) -> int:
        return self.q[0].shape[1]

    @classmethod
    def init(cls, d: int, num_heads: int, rng: np.random.Generator) -> AttentionParams:
        if d % num_heads:
            raise ValueError(f"feature dim {d} is not divisible by num_heads={num_heads}")
        d_k = d // num_heads
        return cls([_glorot(rng, d, d_k) for _ in range(num_heads)],
                   [_glorot(rng, d, d_k) for _ in range(num_heads)])

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for e, (q, k) in enumerate(zip(self.q, self.k)):
            yield f"q.{e}", q
            yield f"k.{e}", k


@dataclass
class GinLayerParams:
    """GIN layer: MLP((1 + eps) * h_i + sum_j A_ij h_j)."""

    eps: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @property
    def in_dim(self) -> int:
        return self.w1.shape[0]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, in_dim: int, hidden: int, out_dim: int, rng: np.random.Generator) -> GinLayerParams:
        return cls(_zeros(), _glorot(rng, in_dim, hidden), _zeros(hidden),
                   _glorot(rng, hidden, out_dim), _zeros(out_dim))

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield from (("eps", self.eps), ("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2))


@dataclass
class EncoderState:
    encoder: list[GinLayerParams]
    decoder: list[GinLayerParams]
    mask_token: Tensor
    aggregation: str = "sum"

    @property
    def hidden(self) -> int:
        return self.encoder[-1].out_dim

    @classmethod
    def init(cls, d: int, hidden: int, rng: np.random.Generator,
             enc_layers: int = 2, dec_layers: int = 1, aggregation: str = "sum") -> EncoderState:
        enc = [GinLayerParams.init(d if i == 0 else hidden, hidden, hidden, rng) for i in range(enc_layers)]
        dec = [GinLayerParams.init(hidden, hidden, d if i == dec_layers - 1 else hidden, rng)
               for i in range(dec_layers)]
        return cls(enc, dec, Tensor(rng.normal(0.0, 0.1, size=d), requires_grad=True), aggregation)

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for i, layer in enumerate(self.encoder):
            for n, t in layer.named():
                yield f"encoder.{i}.{n}", t
        for i, layer in enumerate(self.decoder):
            for n, t in layer.named():
                yield f"decoder.{i}.{n}", t
        yield "mask_token", self.mask_token


@dataclass
class SubgraphParams:
    """Edge scorer MLP([z_i; z_j] * sigmoid(f_g(p))) and the projection f_g.

    The first affine map of the scorer and f_g are stored as source/target
    halves so a score can be assembled per edge from per-node products;
    the function is the same as acting on the concatenated pair.
    """

    w1_src: Tensor  # h x h
    w1_dst: Tensor  # h x h
    b1: Tensor
    w2: Tensor  # h x 1
    b2: Tensor
    fg_w_src: Tensor  # cond_dim x h
    fg_w_dst: Tensor
    fg_b_src: Tensor
    fg_b_dst: Tensor

    @property
    def cond_dim(self) -> int:
        return self.fg_w_src.shape[0]

    @property
    def hidden(self) -> int:
        return self.w1_src.shape[0]

    @classmethod
    def init(cls, hidden: int, cond_dim: int, rng: np.random.Generator) -> SubgraphParams:
        w1 = _glorot(rng, 2 * hidden, hidden).data
        fg = _glorot(rng, cond_dim, 2 * hidden).data
        return cls(Tensor(w1[:hidden], True), Tensor(w1[hidden:], True), _zeros(hidden),
                   _glorot(rng, hidden, 1), _zeros(1),
                   Tensor(fg[:, :hidden], True), Tensor(fg[:, hidden:], True),
                   _zeros(hidden), _zeros(hidden))

    def named(self) -> Iterator[tuple[str, Tensor]]:
        for n in ("w1_src", "w1_dst", "b1", "w2", "b2", "fg_w_src", "fg_w_dst", "fg_b_src", "fg_b_dst"):
            yield n, getattr(self, n)


@dataclass
class ClassifierHead:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor
    mode: str = "single"  # or "multi"
    # standardization of frozen embeddings, fitted on the training split
    in_mean: np.ndarray = field(default_factory=lambda: np.zeros(0))
    in_std: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def num_classes(self) -> int:
        return self.w2.shape[1]

    @classmethod
    def init(cls, hidden: int, num_classes: int, rng: np.random.Generator, mode: str = "single") -> ClassifierHead:
        if num_classes < 2:
            raise ValueError("classifier needs at least 2 classes")
        if mode not in ("single", "multi"):
            raise ValueError(f"unknown classifier mode {mode!r}")
        mid = max(hidden // 2, 1)
        return cls(_glorot(rng, hidden, mid), _zeros(mid), _glorot(rng, mid, num_classes), _zeros(num_classes),
                   mode, np.zeros(hidden), np.ones(hidden))

    def named(self) -> Iterator[tuple[str, Tensor]]:
        yield from (("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2))


@dataclass
class ModelState:
    attention: AttentionParams
    encoder: EncoderState
    subgraph: SubgraphParams
    head: ClassifierHead | None = None

    @classmethod
    def init(cls, d: int, hidden: int, num_heads: int, cond_dim: int, rng: np.random.Generator,
             aggregation: str = "sum") -> ModelState:
        return cls(AttentionParams.init(d, num_heads, rng),
                   EncoderState.init(d, hidden, rng, aggregation=aggregation),
                   SubgraphParams.init(hidden, cond_dim, rng))

    def named_parameters(self, include_head: bool = True) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for n, t in self.attention.named():
            out[f"attention.{n}"] = t
        for n, t in self.encoder.named():
            out[n] = t
        for n, t in self.subgraph.named():
            out[f"subgraph.{n}"] = t
        if include_head and self.head is not None:
            for n, t in self.head.named():
                out[f"head.{n}"] = t
        return out

    def param_count(self) -> int:
        return int(sum(t.size for t in self.named_parameters().values()))

    def zero_grad(self) -> None:
        for t in self.named_parameters().values():
            t.grad = None
