"""One-factor-at-a-time sweeps and self-profiling.

Each sweep point pretrains from scratch with a single config field changed,
fits the head on the training split and scores the held-out split. A point
that raises is kept as a row with an error status; the sweep carries on.
"""
from __future__ import annotations

import csv
import io
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import numerics as nx
from . import plotting
from .classify import evaluate, fit_head, probabilities_from_embedding
from .encoder import encode
from .graphcon import build_graph
from .signal import EcgRecord
from .train import Checkpoint, TrainConfig, pretrain

log = logging.getLogger(__name__)

# sweepable name -> TrainConfig field
PARAMETERS = {
    "lambda_rec": "lambda_rec",
    "lambda_jse": "lambda_jse",
    "lambda_cl": "lambda_cl",
    "q": "q",
    "topk": "topk",
    "mask_rate": "mask_rate",
    "gamma": "gamma",
    "tau_temperature": "tau_temperature",
}

LAMBDA_GRID = tuple(round(0.1 * i, 1) for i in range(1, 11))
DEFAULT_GRIDS: dict[str, tuple] = {
    "lambda_rec": LAMBDA_GRID,
    "lambda_jse": LAMBDA_GRID,
    "lambda_cl": LAMBDA_GRID,
    # five points centered on the defaults
    "q": (0.55, 0.65, 0.75, 0.85, 0.95),
    "topk": (4, 6, 8, 10, 12),
    "mask_rate": (0.5, 0.6, 0.7, 0.8, 0.9),
    "gamma": (1.0, 1.5, 2.0, 2.5, 3.0),
    "tau_temperature": (0.1, 0.3, 0.5, 0.7, 0.9),
}

SWEEP_COLUMNS = ("parameter", "value", "acc", "f1", "auc", "status")


@dataclass(frozen=True)
class SweepSpec:
    parameter: str
    values: tuple = ()
    base: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.parameter not in PARAMETERS:
            raise ValueError(f"unknown sweep parameter {self.parameter!r}; choose from {sorted(PARAMETERS)}")
        if not self.values:
            object.__setattr__(self, "values", DEFAULT_GRIDS[self.parameter])
        for v in self.values:
            self.config_for(v)  # raises on an illegal value

    def config_for(self, value) -> TrainConfig:
        if self.parameter == "topk":
            if float(value) != int(value):
                raise ValueError(f"topk must be an integer, got {value!r}")
            value = int(value)
        kw = {PARAMETERS[self.parameter]: value}
        if self.parameter == "topk":
            kw["sparsifier"] = "topk"
        return self.base.replace(**kw)


@dataclass
class SweepRow:
    parameter: str
    value: float
    acc: float | None
    f1: float | None
    auc: float | None
    status: str = "ok"


def run_point(spec: SweepSpec, index: int, train: Sequence[EcgRecord],
              test: Sequence[EcgRecord]) -> SweepRow:
    value = spec.values[index]
    try:
        ckpt = fit_head(pretrain(train, spec.config_for(value)), train)
        _, (rep, _) = evaluate(ckpt, test)
        return SweepRow(spec.parameter, value, rep.accuracy, rep.macro_f1, rep.macro_auc)
    except Exception as exc:  # a failed point must not end the sweep
        log.warning("sweep %s=%r failed: %s", spec.parameter, value, exc)
        msg = " ".join(str(exc).split())
        return SweepRow(spec.parameter, value, None, None, None, f"error: {type(exc).__name__}: {msg}")


def run_sweep(spec: SweepSpec, train: Sequence[EcgRecord], test: Sequence[EcgRecord],
              jobs: int = 1) -> list[SweepRow]:
    """Rows in grid order, whatever order parallel points finish in."""
    n = len(spec.values)
    if jobs <= 1 or n <= 1:
        return [run_point(spec, i, train, test) for i in range(n)]
    with ProcessPoolExecutor(max_workers=min(jobs, n)) as pool:
        futures = [pool.submit(run_point, spec, i, train, test) for i in range(n)]
        return [f.result() for f in futures]


def _cell(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def sweep_csv(rows: Sequence[SweepRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow([r.parameter, _cell(r.value), _cell(r.acc), _cell(r.f1), _cell(r.auc), r.status])
    return buf.getvalue()


def sweep_figures(rows: Sequence[SweepRow]) -> dict[str, object]:
    """One line plot per metric, keyed by metric name."""
    if not rows:
        return {}
    xs = [r.value for r in rows]
    label = {"acc": "accuracy", "f1": "macro-F1", "auc": "macro-AUC"}
    return {m: plotting.line_plot(xs, {label[m]: [getattr(r, m) for r in rows]}, rows[0].parameter, label[m],
                                  f"{label[m]} vs {rows[0].parameter}")
            for m in ("acc", "f1", "auc")}


# ------------------------------------------------------------- profiling

def _gin_flops(n: int, in_dim: int, hidden: int, out_dim: int, relu_out: bool, mean_agg: bool) -> dict[str, int]:
    matmul = 2 * n * n * in_dim + 2 * n * in_dim * hidden + 2 * n * hidden * out_dim
    elem = 2 * n * in_dim + n * in_dim + 2 * n * hidden + n * out_dim + (n * out_dim if relu_out else 0)
    if mean_agg:
        elem += n * n + n
    return {"matmul": matmul, "elementwise": elem}


def flop_estimate(cfg: TrainConfig, n_nodes: int, num_classes: int | None = None) -> dict[str, int]:
    """Analytic inference FLOPs: graph build, encoder, readout and head.

    A matmul of (a x b)(b x c) costs 2abc; every elementwise op costs one per
    element. Sorting for the threshold is not counted.
    """
    n, d, h = n_nodes, cfg.interval_len, cfg.hidden
    dk = d // cfg.num_heads
    C = num_classes if num_classes is not None else cfg.num_classes
    heads = cfg.num_heads
    att_mm = heads * (2 * 2 * n * d * dk + 2 * n * n * dk)
    att_el = heads * (2 * n * n) + (heads - 1) * n * n + n * n + 2 * n * n  # scale+sigmoid, sum, mean, mask
    norm_el = 4 * n * d  # z-score of patched samples
    mean_agg = cfg.aggregation == "mean"
    l1 = _gin_flops(n, d, h, h, True, mean_agg)
    l2 = _gin_flops(n, h, h, h, False, mean_agg)
    mid = max(h // 2, 1)
    head_mm = 2 * h * mid + 2 * mid * C
    head_el = 2 * h + 2 * mid + C + 3 * C
    out = {
        "graph_matmul": att_mm,
        "graph_elementwise": att_el + norm_el,
        "encoder_matmul": l1["matmul"] + l2["matmul"],
        "encoder_elementwise": l1["elementwise"] + l2["elementwise"],
        "readout": n * h,
        "head": head_mm + head_el,
    }
    out["total"] = sum(out.values())
    return out


def profile(ckpt: Checkpoint, record: EcgRecord, repeats: int = 5) -> dict:
    """Parameter count, analytic FLOPs and wall-clock latency of one inference."""
    if repeats < 3:
        raise ValueError("profile needs repeats >= 3")
    cfg = ckpt.config
    state = ckpt.state
    times = []
    n_nodes = 0
    for _ in range(repeats):
        t0 = time.perf_counter()
        with nx.no_grad():
            g = build_graph(record, cfg.graph, state.attention)
            _, z = encode(g, state.encoder)
        if state.head is not None:
            probabilities_from_embedding(state.head, z.data)
        times.append(1e3 * (time.perf_counter() - t0))
        n_nodes = g.n_nodes
    C = state.head.num_classes if state.head is not None else cfg.num_classes
    flops = flop_estimate(cfg, n_nodes, C)
    return {
        "param_count": state.param_count(),
        "flop_estimate": flops["total"],
        "flops": flops,
        "n_nodes": n_nodes,
        "repeats": repeats,
        "latency_ms": {"median": statistics.median(times), "min": min(times), "max": max(times)},
        "latency_samples_ms": [float(t) for t in np.asarray(times)],
    }
