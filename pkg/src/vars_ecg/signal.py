"""ECG records: on-disk format, normalization, patching, synthetic data.

On-disk layout
--------------
A dataset is a manifest JSON array. Each entry is::

    {"path": "rec_0001.csv", "sampling_rate_hz": 360,
     "record_id": "rec_0001",            # optional, defaults to the file stem
     "label": 2,                          # optional; int or list of ints
     "anomaly_intervals": [[1.5, 3.0]]}   # optional, seconds

``path`` is resolved relative to the manifest. Each CSV has a header row
``lead_0,...,lead_{n-1}`` followed by one sample per line.

Patching drops the ``t mod m`` trailing samples of every lead rather than
padding them.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import expit

from .numerics.rng import make_rng

log = logging.getLogger(__name__)

Label = int | tuple[int, ...] | None


class DatasetError(ValueError):
    """Malformed manifest or record file."""


@dataclass
class EcgRecord:
    leads: np.ndarray  # (n, t)
    sampling_rate_hz: int
    record_id: str = ""
    label: Label = None
    anomaly_intervals: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        self.leads = np.atleast_2d(np.asarray(self.leads, dtype=np.float64))
        if self.sampling_rate_hz <= 0:
            raise DatasetError(f"{self.record_id}: sampling rate must be positive")
        if self.leads.shape[0] < 1 or self.leads.shape[1] < 1:
            raise DatasetError(f"{self.record_id}: need at least one lead and one sample")

    @property
    def n_leads(self) -> int:
        return self.leads.shape[0]

    @property
    def n_samples(self) -> int:
        return self.leads.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sampling_rate_hz


@dataclass(frozen=True)
class PatchConfig:
    interval_len: int
    normalize: bool = True

    def __post_init__(self):
        if self.interval_len < 2:
            raise ValueError("interval_len must be at least 2")


@dataclass(frozen=True)
class NodeMeta:
    lead: int
    start_sample: int
    end_sample: int  # exclusive
    start_s: float
    end_s: float

    def to_dict(self) -> dict:
        return {"lead": self.lead, "start_sample": self.start_sample, "end_sample": self.end_sample,
                "start_s": self.start_s, "end_s": self.end_s}


@dataclass
class NodeFeatures:
    X: np.ndarray  # (N, m)
    node_meta: list[NodeMeta]

    @property
    def n_nodes(self) -> int:
        return self.X.shape[0]


# ------------------------------------------------------------------ I/O

def _read_csv(path: Path, record_id: str) -> np.ndarray:
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except FileNotFoundError:
        raise DatasetError(f"{record_id}: missing record file {path}") from None
    if not rows:
        raise DatasetError(f"{record_id}: empty record file {path}")
    header = rows[0]
    expected = [f"lead_{i}" for i in range(len(header))]
    if header != expected:
        raise DatasetError(f"{record_id}: bad header {header[:4]}..., expected lead_0..lead_{len(header) - 1}")
    body = rows[1:]
    for lineno, row in enumerate(body, start=2):
        if len(row) != len(header):
            raise DatasetError(f"{record_id}: ragged lead lengths at line {lineno} of {path}")
    try:
        data = np.array(body, dtype=np.float64).reshape(len(body), len(header))
    except ValueError as exc:
        raise DatasetError(f"{record_id}: non-numeric sample in {path}: {exc}") from None
    return data.T.copy()


def _parse_label(raw, record_id: str, num_classes: int | None) -> Label:
    if raw is None:
        return None
    ids = raw if isinstance(raw, list) else [raw]
    for v in ids:
        if not isinstance(v, int) or isinstance(v, bool) or v < 0 or (num_classes is not None and v >= num_classes):
            raise DatasetError(f"{record_id}: unknown label id {v!r}")
    return tuple(sorted(ids)) if isinstance(raw, list) else raw


def load_dataset(manifest_path: str | Path, num_classes: int | None = None) -> list[EcgRecord]:
    manifest_path = Path(manifest_path)
    if not manifest_path.exists():
        raise DatasetError(f"manifest not found: {manifest_path}")
    entries = json.loads(manifest_path.read_text())
    if not isinstance(entries, list):
        raise DatasetError("manifest must be a JSON array")
    records = []
    for k, entry in enumerate(entries):
        if not isinstance(entry, dict) or "path" not in entry or "sampling_rate_hz" not in entry:
            raise DatasetError(f"manifest entry {k}: needs 'path' and 'sampling_rate_hz'")
        path = manifest_path.parent / entry["path"]
        record_id = entry.get("record_id") or Path(entry["path"]).stem
        rate = entry["sampling_rate_hz"]
        if not isinstance(rate, int) or rate <= 0:
            raise DatasetError(f"{record_id}: sampling_rate_hz must be a positive integer")
        leads = _read_csv(path, record_id)
        intervals = [(float(a), float(b)) for a, b in entry.get("anomaly_intervals", [])]
        records.append(EcgRecord(leads, rate, record_id,
                                 _parse_label(entry.get("label"), record_id, num_classes), intervals))
    return records


def save_dataset(records: Sequence[EcgRecord], out_dir: str | Path,
                 manifest_name: str = "manifest.json") -> Path:
    """Write CSVs plus a manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        fname = f"{rec.record_id}.csv"
        with open(out_dir / fname, "w", newline="") as fh:
            fh.write(",".join(f"lead_{i}" for i in range(rec.n_leads)) + "\n")
            for row in rec.leads.T:
                fh.write(",".join(repr(float(v)) for v in row) + "\n")
        entry = {"path": fname, "sampling_rate_hz": rec.sampling_rate_hz, "record_id": rec.record_id}
        if rec.label is not None:
            entry["label"] = list(rec.label) if isinstance(rec.label, tuple) else rec.label
        if rec.anomaly_intervals:
            entry["anomaly_intervals"] = [[a, b] for a, b in rec.anomaly_intervals]
        entries.append(entry)
    path = out_dir / manifest_name
    path.write_text(json.dumps(entries, indent=1) + "\n")
    return path


# --------------------------------------------------------- preprocessing

def normalize(record: EcgRecord) -> EcgRecord:
    """Per-lead z-score; a constant lead becomes all zeros."""
    x = record.leads
    mu = x.mean(axis=1, keepdims=True)
    sd = x.std(axis=1, keepdims=True)
    centered = x - mu
    out = np.divide(centered, sd, out=np.zeros_like(x), where=sd > 0)
    return EcgRecord(out, record.sampling_rate_hz, record.record_id, record.label,
                     list(record.anomaly_intervals))


def patch(record: EcgRecord, cfg: PatchConfig) -> NodeFeatures:
    """Split every lead into ``t // m`` contiguous intervals; one row per interval."""
    m = cfg.interval_len
    t = record.n_samples
    if m > t:
        raise ValueError(f"{record.record_id}: interval length {m} exceeds record length {t}")
    rec = normalize(record) if cfg.normalize else record
    per_lead = t // m
    X = rec.leads[:, : per_lead * m].reshape(rec.n_leads * per_lead, m).copy()
    rate = record.sampling_rate_hz
    meta = [
        NodeMeta(lead, k * m, (k + 1) * m, k * m / rate, (k + 1) * m / rate)
        for lead in range(rec.n_leads)
        for k in range(per_lead)
    ]
    return NodeFeatures(X, meta)


# ------------------------------------------------------------- synthesis

ANOMALY_KINDS = ("wide_qrs", "st_elevation", "dropped_beat")

# (offset from R peak in s, width sd in s, amplitude mV)
DEFAULT_WAVES = {"P": (-0.20, 0.025, 0.15), "Q": (-0.03, 0.010, -0.10),
                 "R": (0.0, 0.012, 1.00), "S": (0.03, 0.010, -0.20), "T": (0.28, 0.045, 0.30)}


@dataclass(frozen=True)
class AnomalySpec:
    kind: str
    prevalence: float = 1.0


@dataclass(frozen=True)
class ClassSpec:
    name: str
    count: int
    anomalies: tuple[AnomalySpec, ...] = ()


@dataclass(frozen=True)
class SynthSpec:
    classes: tuple[ClassSpec, ...]
    n_leads: int = 2
    sampling_rate_hz: int = 100
    duration_s: float = 10.0
    heart_rate_bpm: tuple[float, float] = (60.0, 90.0)
    noise_sd: float = 0.05
    episode_s: tuple[float, float] = (2.0, 3.5)

    @classmethod
    def from_dict(cls, d: dict) -> SynthSpec:
        classes = tuple(
            ClassSpec(c["name"], int(c["count"]),
                      tuple(AnomalySpec(a["kind"], float(a.get("prevalence", 1.0)))
                            for a in c.get("anomalies", [])))
            for c in d.get("classes", [])
        )
        kw = {k: d[k] for k in ("n_leads", "sampling_rate_hz", "duration_s", "noise_sd") if k in d}
        for k in ("heart_rate_bpm", "episode_s"):
            if k in d:
                kw[k] = tuple(float(v) for v in d[k])
        return cls(classes=classes, **kw)

    def validate(self) -> None:
        if not self.classes:
            raise ValueError("synth spec: no classes")
        for c in self.classes:
            if c.count < 0:
                raise ValueError(f"synth spec: class {c.name!r} has negative count")
            for a in c.anomalies:
                if a.kind not in ANOMALY_KINDS:
                    raise ValueError(f"synth spec: unknown anomaly kind {a.kind!r}")
                if not 0.0 <= a.prevalence <= 1.0:
                    raise ValueError(f"synth spec: prevalence of {a.kind!r} outside [0, 1]")
        if self.n_leads < 1 or self.sampling_rate_hz <= 0 or self.duration_s <= 0 or self.noise_sd < 0:
            raise ValueError("synth spec: bad signal geometry")


def default_synth_spec(per_class: int = 200) -> SynthSpec:
    """Three classes: normal rhythm, a wide-QRS episode, a raised-plateau episode."""
    return SynthSpec(classes=(
        ClassSpec("normal", per_class),
        ClassSpec("wide_qrs", per_class, (AnomalySpec("wide_qrs"),)),
        ClassSpec("st_elevation", per_class, (AnomalySpec("st_elevation"),)),
    ))


@dataclass(frozen=True)
class BeatPlan:
    """Per-record latent draws; rendering is a pure function of this."""
    r_peaks: tuple[float, ...]
    lead_gains: tuple[float, ...]
    wander_phase: float
    episode: tuple[float, float] | None
    kinds: tuple[str, ...]


def _draw_plan(spec: SynthSpec, anomalies: Sequence[AnomalySpec], rng: np.random.Generator) -> BeatPlan:
    bpm = rng.uniform(*spec.heart_rate_bpm)
    rr = 60.0 / bpm
    first = rng.uniform(0.25, 0.25 + rr)
    peaks = []
    tpos = first
    while tpos < spec.duration_s - 0.1:
        peaks.append(round(tpos, 6))
        tpos += rr * (1.0 + rng.normal(0.0, 0.02))
    gains = tuple(float(g) for g in rng.uniform(0.6, 1.2, size=spec.n_leads))
    phase = float(rng.uniform(0, 2 * np.pi))
    kinds = tuple(a.kind for a in anomalies if rng.random() < a.prevalence)
    episode = None
    if kinds:
        length = rng.uniform(*spec.episode_s)
        start = rng.uniform(0.0, max(spec.duration_s - length, 0.0))
        episode = (round(start, 6), round(start + length, 6))
    return BeatPlan(tuple(peaks), gains, phase, episode, kinds)


def render(spec: SynthSpec, plan: BeatPlan, with_anomaly: bool = True) -> np.ndarray:
    """Noiseless multi-lead waveform for a plan, shape (n_leads, t)."""
    rate = spec.sampling_rate_hz
    t = int(round(spec.duration_s * rate))
    ts = np.arange(t) / rate
    base = np.zeros(t)
    ep = plan.episode if with_anomaly else None
    for r in plan.r_peaks:
        in_ep = ep is not None and ep[0] <= r <= ep[1]
        kinds = plan.kinds if in_ep else ()
        if "dropped_beat" in kinds:
            continue
        for name, (off, width, amp) in DEFAULT_WAVES.items():
            if "wide_qrs" in kinds:
                # ventricular-like beat: broad, tall QRS with a discordant T wave
                if name in ("Q", "R", "S"):
                    width, amp = width * 3.5, amp * 1.6
                elif name == "T":
                    amp = -amp * 1.5
                elif name == "P":
                    amp = 0.0
            base += amp * np.exp(-0.5 * ((ts - r - off) / width) ** 2)
        if "st_elevation" in kinds:
            base += 0.35 * expit((ts - r - 0.05) / 0.01) * expit(-(ts - r - 0.30) / 0.02)
    wander = 0.05 * np.sin(2 * np.pi * 0.3 * ts + plan.wander_phase)
    return np.stack([g * base + wander for g in plan.lead_gains])


def synth_generate(spec: SynthSpec, seed: int) -> list[EcgRecord]:
    """Labeled records in class order; each record's draws come from its own sub-stream."""
    spec.validate()
    records = []
    for ci, cls in enumerate(spec.classes):
        for k in range(cls.count):
            rng = make_rng(seed, "synth", ci, k)
            plan = _draw_plan(spec, cls.anomalies, rng)
            clean = render(spec, plan)
            noisy = clean + rng.normal(0.0, spec.noise_sd, size=clean.shape)
            intervals = [plan.episode] if plan.episode is not None else []
            records.append(EcgRecord(noisy, spec.sampling_rate_hz, f"{cls.name}_{k:04d}", ci, intervals))
    return records


def synth_plan(spec: SynthSpec, seed: int, class_index: int, k: int) -> BeatPlan:
    """Re-draw the latent plan of one generated record (for ground-truth checks)."""
    rng = make_rng(seed, "synth", class_index, k)
    return _draw_plan(spec, spec.classes[class_index].anomalies, rng)


def train_test_split(records: Sequence[EcgRecord], train_fraction: float = 0.7,
                     seed: int = 0) -> tuple[list[EcgRecord], list[EcgRecord]]:
    """Seeded shuffle, then the first ``floor(fraction * n)`` records train."""
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    order = make_rng(seed, "split").permutation(len(records))
    cut = int(math.floor(train_fraction * len(records)))
    return [records[i] for i in order[:cut]], [records[i] for i in order[cut:]]
