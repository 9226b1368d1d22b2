"""Self-supervised pretraining on the weighted reconstruction/JSE/contrastive objective."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .contrastive import LossWeights, nt_xent, total_loss
from .encoder import encode_features, reconstruct, scaled_cosine_error
from .graphcon import EcgGraph, GraphConfig, graph_from_features
from .model import ModelState
from .numerics import AdamState, adam_step, make_rng
from .signal import EcgRecord, NodeFeatures, PatchConfig, patch
from .subgraph import edge_scores, extract_subgraph, jse_loss, sample_cond

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    interval_len: int = 40
    q: float = 0.75
    sparsifier: str = "quantile"
    topk: int = 8
    num_heads: int = 4
    hidden: int = 64
    aggregation: str = "mean"
    mask_rate: float = 0.7
    gamma: float = 2.0
    delta: float = 0.8
    tau_temperature: float = 0.5
    lambda_rec: float = 1.0
    lambda_jse: float = 1.0
    lambda_cl: float = 1.0
    num_classes: int = 3
    cond_dim: int | None = None
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 1e-3
    seed: int = 0
    jse_sign: str = "corrected"
    classifier_mode: str = "single"
    head_epochs: int = 300
    head_lr: float = 1e-2

    def __post_init__(self):
        self.validate()

    @property
    def cond_width(self) -> int:
        """Conditioning vector length: room for class probabilities plus an embedding gradient."""
        return self.cond_dim if self.cond_dim is not None else self.hidden + self.num_classes

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_rec, self.lambda_jse, self.lambda_cl)

    @property
    def graph(self) -> GraphConfig:
        return GraphConfig(self.interval_len, self.q, self.sparsifier, self.topk)

    def validate(self) -> None:
        problems = []
        if self.interval_len < 2:
            problems.append("interval_len must be >= 2")
        elif self.interval_len % self.num_heads:
            problems.append("interval_len must be divisible by num_heads")
        if not 0.0 <= self.q < 1.0:
            problems.append("q must lie in [0, 1)")
        if self.sparsifier not in ("quantile", "topk"):
            problems.append("sparsifier must be 'quantile' or 'topk'")
        if self.topk < 1:
            problems.append("topk must be >= 1")
        if self.num_heads < 1 or self.hidden < 2:
            problems.append("num_heads >= 1 and hidden >= 2 required")
        if not 0.0 < self.mask_rate < 1.0:
            problems.append("mask_rate must lie in (0, 1)")
        if self.gamma < 1.0:
            problems.append("gamma must be >= 1")
        if not 0.0 <= self.delta <= 1.0:
            problems.append("delta must lie in [0, 1]")
        if self.tau_temperature <= 0:
            problems.append("tau_temperature must be positive")
        if min(self.lambda_rec, self.lambda_jse, self.lambda_cl) < 0:
            problems.append("loss weights must be nonnegative")
        if self.num_classes < 2:
            problems.append("num_classes must be >= 2")
        if self.cond_dim is not None and self.cond_dim < 1:
            problems.append("cond_dim must be >= 1")
        if self.batch_size < 2:
            problems.append("batch_size must be >= 2")
        if self.epochs < 0 or self.head_epochs < 0:
            problems.append("epochs must be >= 0")
        if self.learning_rate <= 0 or self.head_lr <= 0:
            problems.append("learning rates must be positive")
        if self.jse_sign not in ("corrected", "paper"):
            problems.append("jse_sign must be 'corrected' or 'paper'")
        if self.classifier_mode not in ("single", "multi"):
            problems.append("classifier_mode must be 'single' or 'multi'")
        if problems:
            raise ValueError("invalid TrainConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown TrainConfig keys: {unknown}")
        return cls(**d)

    def replace(self, **kw) -> TrainConfig:
        return TrainConfig.from_dict({**self.to_dict(), **kw})


@dataclass
class Checkpoint:
    config: TrainConfig
    state: ModelState
    adam: AdamState | None = None
    loss_trace: list[dict] = field(default_factory=list)


def init_state(cfg: TrainConfig) -> ModelState:
    return ModelState.init(cfg.interval_len, cfg.hidden, cfg.num_heads, cfg.cond_width,
                           make_rng(cfg.seed, "init"), cfg.aggregation)


def node_features(records: Sequence[EcgRecord], cfg: TrainConfig) -> list[NodeFeatures]:
    pc = PatchConfig(cfg.interval_len)
    return [patch(r, pc) for r in records]


@dataclass
class BatchLosses:
    rec: nx.Tensor
    jse: nx.Tensor
    cl: nx.Tensor
    total: nx.Tensor


def batch_losses(feats: Sequence[NodeFeatures], state: ModelState, cfg: TrainConfig,
                 rng: np.random.Generator) -> BatchLosses:
    """Forward pass of one mini-batch through both augmentation branches."""
    enc = state.encoder
    p = sample_cond(rng, cfg.cond_width)
    rec_terms, z_graph, z_rec, z_sub = [], [], [], []
    for f in feats:
        g = graph_from_features(f, cfg.graph, state.attention, differentiable=True)
        A = g.adjacency()
        X_rec, plan, _ = reconstruct(g, enc, cfg.mask_rate, rng)
        rec_terms.append(scaled_cosine_error(g.X, X_rec, plan, cfg.gamma))
        # reconstruction view: the graph with its features replaced by the decoder output
        z_rec.append(encode_features(X_rec, A, enc)[1])
        H, z = encode_features(g.X, A, enc)
        z_graph.append(z)
        rows, cols = g.edges()
        if rows.size:
            w = edge_scores(H, rows, cols, p, state.subgraph)
            view = extract_subgraph(g, w, cfg.delta, rows, cols, straight_through=True)
            A_sub = view.adjacency()
        else:
            A_sub = np.zeros_like(g.A)
        z_sub.append(encode_features(g.X, A_sub, enc)[1])
    l_rec = nx.mean(nx.stack_rows(rec_terms))
    Zg, Zr, Zs = nx.stack_rows(z_graph), nx.stack_rows(z_rec), nx.stack_rows(z_sub)
    l_jse = jse_loss(Zg, Zs, p, state.subgraph, cfg.jse_sign)
    l_cl = nt_xent(Zr, Zs, cfg.tau_temperature)
    return BatchLosses(l_rec, l_jse, l_cl, total_loss(l_rec, l_jse, l_cl, cfg.weights))


def batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    out = [order[s:s + batch_size] for s in range(0, n, batch_size)]
    if out and len(out[-1]) < 2:
        warnings.warn(f"dropping final batch of {len(out[-1])} sample(s): JSE needs at least 2",
                      RuntimeWarning, stacklevel=2)
        out.pop()
    return out


def pretrain(dataset: Sequence[EcgRecord], cfg: TrainConfig,
             on_epoch: Callable[[int, dict], None] | None = None) -> Checkpoint:
    """Pretrain attention, encoder/decoder, mask token and subgraph scorer.

    Deterministic for a fixed ``cfg.seed``; the loss trace holds per-epoch
    means of each component.
    """
    if not dataset:
        raise ValueError("pretrain: empty dataset")
    state = init_state(cfg)
    params = state.named_parameters(include_head=False)
    adam = AdamState(learning_rate=cfg.learning_rate)
    feats = node_features(dataset, cfg)
    trace = []
    for epoch in range(cfg.epochs):
        sums = {"rec": 0.0, "jse": 0.0, "cl": 0.0, "total": 0.0}
        steps = 0
        for b, idx in enumerate(batches(len(feats), cfg.batch_size, make_rng(cfg.seed, "epoch", epoch))):
            rng = make_rng(cfg.seed, "batch", epoch, b)
            state.zero_grad()
            losses = batch_losses([feats[i] for i in idx], state, cfg, rng)
            nx.backward(losses.total, params.values())
            adam_step(adam, params)
            for k in sums:
                sums[k] += getattr(losses, k).item()
            steps += 1
        row = {"epoch": epoch + 1, **{k: (v / steps if steps else math.nan) for k, v in sums.items()}}
        trace.append(row)
        log.info("epoch %d: total=%.4f rec=%.4f jse=%.4f cl=%.4f", row["epoch"], row["total"],
                 row["rec"], row["jse"], row["cl"])
        if on_epoch is not None:
            on_epoch(epoch + 1, row)
    state.zero_grad()
    return Checkpoint(cfg, state, adam, trace)
