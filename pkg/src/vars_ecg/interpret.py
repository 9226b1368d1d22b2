"""Per-record explanations from the trained subgraph scorer, match rates and dashboards.

The scorer is conditioned on P = [class probabilities ; d logit_top / d z],
edges are scored on the record's own graph, and a node's importance is the
largest score among its incident edges, min-max rescaled per graph.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import jsonschema
import numpy as np

from . import numerics as nx
from . import plotting
from .classify import MissingHeadError, head_logits
from .encoder import encode
from .graphcon import build_graph
from .signal import EcgRecord
from .subgraph import edge_scores
from .train import Checkpoint

SCHEMA_VERSION = 1
DEFAULT_TAU_SALIENCY = 0.3
DEFAULT_TOLERANCES = tuple(round(0.25 * i, 2) for i in range(21))
EDGE_BINS = 20
EDGE_CHUNK = 65536

_SEGMENT = {
    "type": "object",
    "required": ["node", "lead", "start_s", "end_s", "importance"],
    "additionalProperties": False,
    "properties": {
        "node": {"type": "integer", "minimum": 0},
        "lead": {"type": "integer", "minimum": 0},
        "start_s": {"type": "number", "minimum": 0},
        "end_s": {"type": "number", "minimum": 0},
        "importance": {"type": "number", "minimum": 0, "maximum": 1},
    },
}

EXPLANATION_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Explanation",
    "type": "object",
    "required": ["schema_version", "record_id", "duration_s", "node_importance", "edges", "segments",
                 "salient_segments", "top1_segment", "prediction", "thresholds"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "record_id": {"type": "string"},
        "duration_s": {"type": "number", "minimum": 0},
        "node_importance": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
        "edges": {
            "type": "object",
            "required": ["source", "target", "score"],
            "additionalProperties": False,
            "properties": {
                "source": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "target": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                "score": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
            },
        },
        "segments": {"type": "array", "items": _SEGMENT},
        "salient_segments": {"type": "array", "items": _SEGMENT},
        "top1_segment": {"anyOf": [_SEGMENT, {"type": "null"}]},
        "prediction": {
            "type": "object",
            "required": ["mode", "probabilities", "predicted"],
            "additionalProperties": False,
            "properties": {
                "mode": {"enum": ["single", "multi"]},
                "probabilities": {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}},
                "predicted": {"type": "integer", "minimum": 0},
            },
        },
        "thresholds": {
            "type": "object",
            "required": ["tau_saliency", "top_k"],
            "additionalProperties": False,
            "properties": {
                "tau_saliency": {"type": "number", "minimum": 0, "maximum": 1},
                "top_k": {"anyOf": [{"type": "integer", "minimum": 1}, {"type": "null"}]},
            },
        },
    },
}

DASHBOARD_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "Dashboard",
    "type": "object",
    "required": ["schema_version", "explanation", "heatmap", "edge_histogram", "leads"],
    "additionalProperties": False,
    "properties": {
        "schema_version": {"const": SCHEMA_VERSION},
        "explanation": EXPLANATION_SCHEMA,
        "heatmap": {
            "type": "object",
            "required": ["rows", "cols", "values"],
            "additionalProperties": False,
            "properties": {
                "rows": {"type": "integer", "minimum": 1},
                "cols": {"type": "integer", "minimum": 1},
                "values": {"type": "array", "items": {"type": "array", "items": {"type": "number"}}},
            },
        },
        "edge_histogram": {
            "type": "object",
            "required": ["bin_edges", "counts"],
            "additionalProperties": False,
            "properties": {
                "bin_edges": {"type": "array", "items": {"type": "number"}, "minItems": EDGE_BINS + 1,
                              "maxItems": EDGE_BINS + 1},
                "counts": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": EDGE_BINS,
                           "maxItems": EDGE_BINS},
            },
        },
        "leads": {"type": "integer", "minimum": 1},
    },
}


@dataclass(frozen=True)
class Segment:
    node: int
    lead: int
    start_s: float
    end_s: float
    importance: float

    def to_dict(self) -> dict:
        return {"node": self.node, "lead": self.lead, "start_s": self.start_s, "end_s": self.end_s,
                "importance": self.importance}

    @classmethod
    def from_dict(cls, d: Mapping) -> Segment:
        return cls(int(d["node"]), int(d["lead"]), float(d["start_s"]), float(d["end_s"]),
                   float(d["importance"]))


@dataclass
class Explanation:
    record_id: str
    duration_s: float
    node_importance: np.ndarray
    edge_rows: np.ndarray
    edge_cols: np.ndarray
    edge_scores: np.ndarray
    segments: list[Segment]
    probabilities: np.ndarray
    mode: str = "single"
    tau_saliency: float = DEFAULT_TAU_SALIENCY
    top_k: int | None = None
    salient: list[Segment] = field(default_factory=list)

    @property
    def predicted(self) -> int:
        return int(np.argmax(self.probabilities))

    @property
    def top1_segment(self) -> Segment | None:
        # first node wins ties, matching argmax
        if not self.segments:
            return None
        return self.segments[int(np.argmax(self.node_importance))]

    def to_dict(self) -> dict:
        top = self.top1_segment
        return {
            "schema_version": SCHEMA_VERSION,
            "record_id": self.record_id,
            "duration_s": self.duration_s,
            "node_importance": self.node_importance.tolist(),
            "edges": {"source": self.edge_rows.tolist(), "target": self.edge_cols.tolist(),
                      "score": self.edge_scores.tolist()},
            "segments": [s.to_dict() for s in self.segments],
            "salient_segments": [s.to_dict() for s in self.salient],
            "top1_segment": top.to_dict() if top is not None else None,
            "prediction": {"mode": self.mode, "probabilities": self.probabilities.tolist(),
                           "predicted": self.predicted},
            "thresholds": {"tau_saliency": self.tau_saliency, "top_k": self.top_k},
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: Mapping) -> Explanation:
        validate_explanation(d)
        e = d["edges"]
        th = d["thresholds"]
        return cls(d["record_id"], float(d["duration_s"]), np.asarray(d["node_importance"], dtype=np.float64),
                   np.asarray(e["source"], dtype=np.int64), np.asarray(e["target"], dtype=np.int64),
                   np.asarray(e["score"], dtype=np.float64), [Segment.from_dict(s) for s in d["segments"]],
                   np.asarray(d["prediction"]["probabilities"], dtype=np.float64), d["prediction"]["mode"],
                   float(th["tau_saliency"]), th["top_k"], [Segment.from_dict(s) for s in d["salient_segments"]])


def validate_explanation(doc: Mapping) -> None:
    jsonschema.validate(doc, EXPLANATION_SCHEMA)


def validate_dashboard(doc: Mapping) -> None:
    jsonschema.validate(doc, DASHBOARD_SCHEMA)


def node_importance(n_nodes: int, rows: np.ndarray, cols: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Max incident (in or out) edge score per node, min-max rescaled to [0, 1].

    The rescale range comes from nodes that have at least one edge; a node
    without edges gets 0. If all nodes with edges share one raw value the
    rescale is undefined and every node's importance is 1.
    """
    raw = np.full(n_nodes, -np.inf)
    if scores.size:
        np.maximum.at(raw, rows, scores)
        np.maximum.at(raw, cols, scores)
    has_edge = np.isfinite(raw)
    if not has_edge.any():
        return np.ones(n_nodes)
    lo, hi = raw[has_edge].min(), raw[has_edge].max()
    if hi - lo <= 0.0:
        return np.ones(n_nodes)
    out = np.zeros(n_nodes)
    out[has_edge] = (raw[has_edge] - lo) / (hi - lo)
    out[raw == hi] = 1.0  # exact endpoints despite rounding
    out[raw == lo] = 0.0
    return out


def conditioning_vector(ckpt: Checkpoint, z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(P, probabilities): class probabilities followed by the top-class logit gradient wrt z.

    The result is truncated or zero-padded to the scorer's conditioning width.
    """
    head = ckpt.state.head
    if head is None:
        raise MissingHeadError("checkpoint has no classifier head; run fit first")
    zt = nx.Tensor(np.atleast_2d(z), requires_grad=True)
    logits = head_logits(head, zt)
    probs = nx.softmax_rows(logits).data[0] if head.mode == "single" else nx.sigmoid(logits).data[0]
    top = int(np.argmax(probs))
    pick = np.zeros(logits.shape)
    pick[0, top] = 1.0
    nx.backward(nx.sum(nx.mul(logits, pick)), [zt])
    grad = zt.grad
    for t in dict(head.named()).values():
        t.grad = None
    P = np.concatenate([probs, np.asarray(grad).reshape(-1)])
    width = ckpt.state.subgraph.cond_dim
    if P.size >= width:
        P = P[:width]
    else:
        P = np.concatenate([P, np.zeros(width - P.size)])
    return P, probs


def salient_segments(expl: Explanation, tau_saliency: float = DEFAULT_TAU_SALIENCY,
                     top_k: int | None = None) -> list[Segment]:
    """Segments with importance >= tau, highest first (node order breaks ties)."""
    if not 0.0 <= tau_saliency <= 1.0:
        raise ValueError(f"tau_saliency must lie in [0, 1], got {tau_saliency}")
    if top_k is not None and top_k < 1:
        raise ValueError("top_k must be >= 1")
    keep = [s for s in expl.segments if s.importance >= tau_saliency]
    keep.sort(key=lambda s: (-s.importance, s.node))
    return keep[:top_k] if top_k is not None else keep


def explain(ckpt: Checkpoint, record: EcgRecord, tau_saliency: float = DEFAULT_TAU_SALIENCY,
            top_k: int | None = None) -> Explanation:
    if ckpt.state.head is None:
        raise MissingHeadError("checkpoint has no classifier head; run fit first")
    cfg = ckpt.config
    with nx.no_grad():
        g = build_graph(record, cfg.graph, ckpt.state.attention)
        H, z = encode(g, ckpt.state.encoder)
    P, probs = conditioning_vector(ckpt, z.data.reshape(-1))
    rows, cols = g.edges()
    if rows.size:
        with nx.no_grad():
            w = edge_scores(H, rows, cols, P, ckpt.state.subgraph, chunk=EDGE_CHUNK)
        scores = np.asarray(w.data if isinstance(w, nx.Tensor) else w, dtype=np.float64)
    else:
        scores = np.zeros(0)
    imp = node_importance(g.n_nodes, rows, cols, scores)
    segs = [Segment(i, m.lead, m.start_s, m.end_s, float(imp[i])) for i, m in enumerate(g.node_meta)]
    expl = Explanation(record.record_id, record.duration_s, imp, rows.astype(np.int64), cols.astype(np.int64),
                       scores, segs, probs, ckpt.state.head.mode, tau_saliency, top_k)
    expl.salient = salient_segments(expl, tau_saliency, top_k)
    return expl


@dataclass(frozen=True)
class ReferenceAnnotation:
    record_id: str
    start_s: float
    end_s: float

    def __post_init__(self):
        if not 0.0 <= self.start_s < self.end_s:
            raise ValueError(f"{self.record_id}: reference interval needs 0 <= start < end, "
                             f"got ({self.start_s}, {self.end_s})")

    @classmethod
    def from_record(cls, record: EcgRecord) -> ReferenceAnnotation | None:
        if not record.anomaly_intervals:
            return None
        s, e = record.anomaly_intervals[0]
        if e > record.duration_s + 1e-9:
            raise ValueError(f"{record.record_id}: reference interval ends after the record")
        return cls(record.record_id, float(s), float(e))


def overlaps(segment: Segment, ref: ReferenceAnnotation, tolerance_s: float) -> bool:
    """Closed-interval test of [start - tol, end + tol] against the reference."""
    return segment.start_s - tolerance_s <= ref.end_s and ref.start_s <= segment.end_s + tolerance_s


@dataclass
class MatchReport:
    tolerance_s: float
    rate: float
    matched: int
    evaluated: int
    excluded: list[str]  # explanations with no reference
    unexplained: list[str]  # references with no explanation
    venn: dict[str, float]

    def to_dict(self) -> dict:
        return {"tolerance_s": self.tolerance_s, "rate": self.rate, "matched": self.matched,
                "evaluated": self.evaluated, "excluded": self.excluded, "unexplained": self.unexplained,
                "venn": self.venn}


def _as_reference_map(references) -> dict[str, ReferenceAnnotation]:
    if isinstance(references, Mapping):
        return dict(references)
    return {r.record_id: r for r in references}


def match_rate(explanations: Sequence[Explanation], references, tolerance_s: float = 0.0) -> MatchReport:
    """Share of explained, annotated records whose top-1 segment hits the reference.

    ``venn`` gives the (only reference, only predicted, both) time coverage in
    seconds, summed over evaluated records, at zero tolerance.
    """
    if tolerance_s < 0:
        raise ValueError("tolerance must be >= 0")
    refs = _as_reference_map(references)
    matched = evaluated = 0
    excluded = []
    only_ref = only_pred = both = 0.0
    for e in explanations:
        ref = refs.get(e.record_id)
        top = e.top1_segment
        if ref is None or top is None:
            excluded.append(e.record_id)
            continue
        evaluated += 1
        matched += overlaps(top, ref, tolerance_s)
        inter = max(0.0, min(top.end_s, ref.end_s) - max(top.start_s, ref.start_s))
        both += inter
        only_ref += (ref.end_s - ref.start_s) - inter
        only_pred += (top.end_s - top.start_s) - inter
    seen = {e.record_id for e in explanations}
    unexplained = sorted(set(refs) - seen)
    rate = matched / evaluated if evaluated else 0.0
    venn = {"only_reference": only_ref, "only_predicted": only_pred, "both": both}
    return MatchReport(float(tolerance_s), rate, matched, evaluated, excluded, unexplained, venn)


def tolerance_sweep(explanations: Sequence[Explanation], references,
                    tolerances: Sequence[float] = DEFAULT_TOLERANCES) -> list[tuple[float, float]]:
    return [(float(t), match_rate(explanations, references, t).rate) for t in sorted(tolerances)]


def match_rate_csv(curve: Sequence[tuple[float, float]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("tolerance", "rate"))
    for t, r in curve:
        w.writerow((repr(float(t)), repr(float(r))))
    return buf.getvalue()


def match_rate_figure(curve: Sequence[tuple[float, float]]):
    fig = plotting.line_plot([t for t, _ in curve], {"match rate": [r for _, r in curve]},
                             "tolerance (s)", "match rate", "Top-1 segment match rate")
    fig.axes[0].set_ylim(-0.02, 1.02)
    return fig


def heatmap_shape(n: int) -> tuple[int, int]:
    """Smallest rows x cols >= n with |rows - cols| <= 1."""
    if n < 1:
        return 1, 1
    a = math.isqrt(n - 1) + 1  # ceil(sqrt(n))
    return (a - 1, a) if (a - 1) * a >= n else (a, a)


def heatmap_grid(importance: np.ndarray) -> np.ndarray:
    r, c = heatmap_shape(importance.size)
    grid = np.zeros(r * c)
    grid[:importance.size] = importance
    return grid.reshape(r, c)


def edge_histogram(scores: np.ndarray, bins: int = EDGE_BINS) -> tuple[np.ndarray, np.ndarray]:
    counts, edges = np.histogram(scores, bins=bins, range=(0.0, 1.0))
    return counts, edges


def dashboard_data(expl: Explanation, record: EcgRecord) -> dict:
    if expl.record_id != record.record_id:
        raise ValueError(f"explanation is for {expl.record_id!r}, record is {record.record_id!r}")
    grid = heatmap_grid(expl.node_importance)
    counts, edges = edge_histogram(expl.edge_scores)
    return {"schema_version": SCHEMA_VERSION, "explanation": expl.to_dict(),
            "heatmap": {"rows": grid.shape[0], "cols": grid.shape[1], "values": grid.tolist()},
            "edge_histogram": {"bin_edges": edges.tolist(), "counts": counts.astype(int).tolist()},
            "leads": record.n_leads}


def render_dashboard(expl: Explanation, record: EcgRecord, class_names: Sequence[str] | None = None
                     ) -> tuple[bytes, str]:
    """(SVG bytes, JSON text) for one explained record."""
    data = dashboard_data(expl, record)
    grid = np.asarray(data["heatmap"]["values"])
    counts = np.asarray(data["edge_histogram"]["counts"])
    edges = np.asarray(data["edge_histogram"]["bin_edges"])
    n = record.n_leads
    t = np.arange(record.n_samples) / record.sampling_rate_hz
    names = list(class_names) if class_names else [str(i) for i in range(expl.probabilities.size)]

    with plotting.plt.rc_context(plotting.STYLE):
        fig = plotting.plt.figure(figsize=(10.0, max(3.6, 0.8 * n + 1.2)))
        outer = fig.add_gridspec(1, 2, width_ratios=(3.0, 1.2))
        left = outer[0, 0].subgridspec(n, 1, hspace=0.15)
        right = outer[0, 1].subgridspec(3, 1, hspace=0.8)
        for lead in range(n):
            ax = fig.add_subplot(left[lead, 0])
            ax.plot(t, record.leads[lead], color="0.15", lw=0.5)
            for s in expl.salient:
                if s.lead == lead:
                    ax.axvspan(s.start_s, s.end_s, color="C3", alpha=0.1 + 0.4 * s.importance, lw=0)
            ax.set_ylabel(f"lead {lead}")
            ax.set_xlim(0.0, record.duration_s)
            if lead == 0:
                ax.set_title(f"{expl.record_id}: salient segments (tau={expl.tau_saliency:g})")
            if lead < n - 1:
                ax.set_xticklabels([])
            else:
                ax.set_xlabel("time (s)")
        ax = fig.add_subplot(right[0, 0])
        im = ax.imshow(grid, cmap="viridis", vmin=0.0, vmax=1.0, aspect="auto", interpolation="nearest")
        fig.colorbar(im, ax=ax, fraction=0.05)
        ax.set_title("node importance")
        ax.set_xticks([])
        ax.set_yticks([])
        ax = fig.add_subplot(right[1, 0])
        ax.bar(edges[:-1], counts, width=np.diff(edges), align="edge", color="C0")
        ax.set_title("edge scores")
        ax.set_xlim(0.0, 1.0)
        ax = fig.add_subplot(right[2, 0])
        ax.barh(range(len(names)), expl.probabilities,
                color=["C3" if i == expl.predicted else "C7" for i in range(len(names))])
        ax.set_yticks(range(len(names)))
        ax.set_yticklabels(names)
        ax.set_xlim(0.0, 1.0)
        ax.set_title("prediction")
        fig.subplots_adjust(left=0.06, right=0.97, top=0.9, bottom=0.14)
    svg = plotting.svg_bytes(fig)
    return svg, json.dumps(data, sort_keys=True, allow_nan=False) + "\n"
