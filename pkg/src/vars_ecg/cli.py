"""Command-line entry point: ``vars-ecg <command> --config run.json --out DIR``.

Every command validates the run config before doing any work, refuses to
write into a non-empty output directory unless ``--force`` is given, and
finishes by writing ``run_manifest.json``. Failures print one JSON line
``{"error": ..., "message": ...}`` to stderr and exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import os
import platform
import sys
import time
import typing
from dataclasses import fields
from importlib import metadata
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__, plotting
from .checkpoint import load_checkpoint, save_checkpoint
from .classify import evaluate, fit_head, label_matrix
from .interpret import (DEFAULT_TOLERANCES, ReferenceAnnotation, explain, match_rate, match_rate_csv,
                        match_rate_figure, render_dashboard, tolerance_sweep)
from .metrics import compute_metrics, metrics_csv
from .signal import ANOMALY_KINDS, SynthSpec, default_synth_spec, load_dataset, save_dataset, synth_generate, \
    train_test_split
from .sweeps import PARAMETERS, SweepSpec, profile, run_sweep, sweep_csv, sweep_figures
from .train import TrainConfig, pretrain

log = logging.getLogger("vars_ecg")

COMMANDS = ("synth", "train", "fit", "eval", "explain", "sweep", "bench")
EXIT_CONFIG = 2
EXIT_FAILURE = 1

_ENUMS = {"sparsifier": ["quantile", "topk"], "aggregation": ["sum", "mean"],
          "jse_sign": ["corrected", "paper"], "classifier_mode": ["single", "multi"]}


class ConfigError(ValueError):
    """The run config failed validation; ``problems`` lists every issue."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


class OutputExistsError(RuntimeError):
    pass


def _field_schema(name: str, tp) -> dict:
    if name in _ENUMS:
        return {"enum": _ENUMS[name]}
    args = typing.get_args(tp)
    if type(None) in args:
        inner = next(a for a in args if a is not type(None))
        return {"anyOf": [_field_schema(name, inner), {"type": "null"}]}
    if tp is bool:
        return {"type": "boolean"}
    if tp is int:
        return {"type": "integer"}
    if tp is float:
        return {"type": "number"}
    return {"type": "string"}


def _train_schema() -> dict:
    hints = typing.get_type_hints(TrainConfig)
    return {"type": "object", "additionalProperties": False,
            "properties": {f.name: _field_schema(f.name, hints[f.name]) for f in fields(TrainConfig)}}


_PAIR = {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 2, "maxItems": 2}

SYNTH_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["classes"],
    "properties": {
        "classes": {"type": "array", "minItems": 1, "items": {
            "type": "object", "additionalProperties": False, "required": ["name", "count"],
            "properties": {
                "name": {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"},
                "count": {"type": "integer", "minimum": 0},
                "anomalies": {"type": "array", "items": {
                    "type": "object", "additionalProperties": False, "required": ["kind"],
                    "properties": {"kind": {"enum": list(ANOMALY_KINDS)},
                                   "prevalence": {"type": "number", "minimum": 0, "maximum": 1}}}},
            }}},
        "n_leads": {"type": "integer", "minimum": 1},
        "sampling_rate_hz": {"type": "integer", "minimum": 1},
        "duration_s": {"type": "number", "exclusiveMinimum": 0},
        "heart_rate_bpm": _PAIR,
        "noise_sd": {"type": "number", "minimum": 0},
        "episode_s": _PAIR,
    },
}

RUN_CONFIG_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "title": "RunConfig",
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "seed": {"type": "integer", "minimum": 0},
        "train": _train_schema(),
        "synth": SYNTH_SCHEMA,
        "data": {"type": "object", "additionalProperties": False, "properties": {
            "manifest": {"type": "string"},
            "test_manifest": {"type": "string"},
            "train_fraction": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        }},
        "checkpoint": {"type": "string"},
        "eval": {"type": "object", "additionalProperties": False, "properties": {
            "predictions": {"type": "string"},
            "split": {"enum": ["test", "train", "all"]},
        }},
        "explain": {"type": "object", "additionalProperties": False, "properties": {
            "tau_saliency": {"type": "number", "minimum": 0, "maximum": 1},
            "top_k": {"anyOf": [{"type": "integer", "minimum": 1}, {"type": "null"}]},
            "tolerances": {"type": "array", "minItems": 1, "items": {"type": "number", "minimum": 0}},
            "dashboards": {"type": "integer", "minimum": 0},
            "split": {"enum": ["test", "train", "all"]},
            "class_names": {"type": "array", "items": {"type": "string"}},
        }},
        "sweep": {"type": "object", "additionalProperties": False, "required": ["parameter"], "properties": {
            "parameter": {"enum": sorted(PARAMETERS)},
            "values": {"type": "array", "minItems": 1, "items": {"type": "number"}},
        }},
        "bench": {"type": "object", "additionalProperties": False, "properties": {
            "repeats": {"type": "integer", "minimum": 3},
            "record_index": {"type": "integer", "minimum": 0},
        }},
    },
}


def validate_config(doc) -> None:
    """Raise ConfigError naming every schema and semantic problem at once."""
    validator = jsonschema.Draft202012Validator(RUN_CONFIG_SCHEMA)
    problems = []
    bad: set[tuple] = set()
    for err in sorted(validator.iter_errors(doc), key=lambda e: [str(p) for p in e.absolute_path]):
        path = tuple(err.absolute_path)
        where = "/".join(str(p) for p in path) or "<root>"
        problems.append(f"{where}: {err.message}")
        if len(path) > 1 or err.validator == "type":
            bad.add(path[:2])
    if not isinstance(doc, dict):
        raise ConfigError(problems)
    # semantic checks run on whatever passed the schema, so one pass reports everything
    train = doc.get("train")
    if isinstance(train, dict) and ("train",) not in bad:
        known = {f.name for f in fields(TrainConfig)}
        clean = {k: v for k, v in train.items() if k in known and ("train", k) not in bad}
        try:
            TrainConfig.from_dict(clean)
        except (ValueError, TypeError) as exc:
            problems.append(f"train: {exc}")
    if "synth" in doc and not any(b[:1] == ("synth",) for b in bad):
        try:
            SynthSpec.from_dict(doc["synth"]).validate()
        except (ValueError, TypeError, KeyError) as exc:
            problems.append(f"synth: {exc}")
    if problems:
        raise ConfigError(problems)


def config_hash(doc: dict) -> str:
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def _versions() -> dict[str, str]:
    out = {"python": platform.python_version(), "vars_ecg": __version__}
    for pkg in ("numpy", "scipy", "matplotlib", "jsonschema"):
        try:
            out[pkg] = metadata.version(pkg)
        except metadata.PackageNotFoundError:
            out[pkg] = "unknown"
    return out


class Run:
    """Resolved config, paths and the output directory of one command."""

    def __init__(self, command: str, doc: dict, base_dir: Path, out: Path, force: bool, jobs: int,
                 tolerances: list[float] | None):
        self.command = command
        self.doc = doc
        self.base = base_dir
        self.out = out
        self.force = force
        self.jobs = jobs
        self.tolerances = tolerances
        self.seed = int(doc.get("seed", doc.get("train", {}).get("seed", 0)))
        self.outputs: list[str] = []

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict({**self.doc.get("train", {}), "seed": self.seed})

    def path(self, key: str, section: str | None = None) -> Path:
        holder = self.doc.get(section, {}) if section else self.doc
        if key not in holder:
            where = f"{section}.{key}" if section else key
            raise ConfigError([f"{where}: required by '{self.command}' but missing"])
        p = Path(holder[key])
        return p if p.is_absolute() else self.base / p

    def prepare_out(self) -> None:
        if self.out.exists() and any(self.out.iterdir()) and not self.force:
            raise OutputExistsError(f"output directory {self.out} is not empty; pass --force to overwrite")
        self.out.mkdir(parents=True, exist_ok=True)

    def write(self, rel: str, data: str | bytes) -> Path:
        p = self.out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        if isinstance(data, str):
            p.write_text(data)
        else:
            p.write_bytes(data)
        self.outputs.append(rel)
        return p

    def figure(self, rel: str, fig) -> None:
        self.write(rel, plotting.svg_bytes(fig))

    def dataset(self):
        cfg = self.train_config
        return load_dataset(self.path("manifest", "data"), cfg.num_classes)

    def split(self, which: str = "test"):
        records = self.dataset()
        if which == "all":
            return records
        if which == "test" and "test_manifest" in self.doc.get("data", {}):
            return load_dataset(self.path("test_manifest", "data"), self.train_config.num_classes)
        frac = float(self.doc.get("data", {}).get("train_fraction", 0.7))
        train, test = train_test_split(records, frac, self.seed)
        return train if which == "train" else test

    def manifest(self, started: float) -> None:
        doc = {"command": self.command, "config_hash": config_hash(self.doc), "seed": self.seed,
               "versions": _versions(), "wall_time_s": time.perf_counter() - started,
               "outputs": sorted(self.outputs)}
        (self.out / "run_manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ------------------------------------------------------------- commands

def cmd_synth(run: Run) -> None:
    """Generate a labeled synthetic dataset (manifest + CSVs)."""
    spec = SynthSpec.from_dict(run.doc["synth"]) if "synth" in run.doc else default_synth_spec()
    records = synth_generate(spec, run.seed)
    save_dataset(records, run.out)
    run.outputs += ["manifest.json"] + [f"{r.record_id}.csv" for r in records]
    log.info("wrote %d records to %s", len(records), run.out)


def _trace_csv(trace: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ("epoch", "total", "rec", "jse", "cl")
    w.writerow(cols)
    for row in trace:
        w.writerow([row["epoch"]] + [repr(float(row[c])) for c in cols[1:]])
    return buf.getvalue()


def cmd_train(run: Run) -> None:
    """Self-supervised pretraining; writes checkpoint.bin and the loss trace."""
    cfg = run.train_config
    train = run.split("train")
    log.info("pretraining on %d records for %d epochs", len(train), cfg.epochs)
    ckpt = pretrain(train, cfg, on_epoch=lambda e, row: log.info("epoch %d total %.4f", e, row["total"]))
    save_checkpoint(ckpt, run.out / "checkpoint.bin")
    run.outputs.append("checkpoint.bin")
    run.write("loss_trace.csv", _trace_csv(ckpt.loss_trace))
    if ckpt.loss_trace:
        xs = [r["epoch"] for r in ckpt.loss_trace]
        run.figure("loss_curve.svg", plotting.line_plot(
            xs, {k: [r[k] for r in ckpt.loss_trace] for k in ("total", "rec", "jse", "cl")},
            "epoch", "loss", "Pretraining loss"))


def cmd_fit(run: Run) -> None:
    """Fit the classifier head on frozen embeddings."""
    ckpt = load_checkpoint(run.path("checkpoint"))
    train = run.split("train")
    ckpt = fit_head(ckpt, train)
    save_checkpoint(ckpt, run.out / "checkpoint.bin")
    run.outputs.append("checkpoint.bin")


def _read_predictions(path: Path, records) -> list[list[float]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    by_id = {r["record_id"]: r for r in rows}
    cols = sorted((k for k in rows[0] if k.startswith("p_")), key=lambda k: int(k[2:])) if rows else []
    missing = [r.record_id for r in records if r.record_id not in by_id]
    if missing:
        raise ValueError(f"predictions file lacks {len(missing)} record(s), first {missing[0]!r}")
    return [[float(by_id[r.record_id][c]) for c in cols] for r in records]


def _predictions_csv(records, P) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["record_id"] + [f"p_{c}" for c in range(P.shape[1])])
    for r, p in zip(records, P):
        w.writerow([r.record_id] + [repr(float(v)) for v in p])
    return buf.getvalue()


def _per_class_figure(report):
    with plotting.plt.rc_context(plotting.STYLE):
        fig = plotting.plt.figure(figsize=(4.5, 2.8))
        ax = fig.add_subplot(1, 1, 1)
        classes = list(report.per_class)
        width = 0.27
        for k, (name, attr) in enumerate((("precision", "precision"), ("sensitivity", "sensitivity"),
                                          ("F1", "f1"))):
            ax.bar([c + (k - 1) * width for c in classes], [getattr(report.per_class[c], attr) for c in classes],
                   width=width, color=f"C{k}", label=name)
        ax.set_xticks(classes)
        ax.set_xlabel("class")
        ax.set_ylim(0.0, 1.05)
        ax.set_title(f"Per-class metrics ({report.scope}, n={report.n})")
        ax.legend(frameon=False, ncol=3)
        fig.tight_layout()
    return fig


def cmd_eval(run: Run) -> None:
    """Score predictions; writes metrics CSV/JSON and a per-class figure."""
    which = run.doc.get("eval", {}).get("split", "test")
    records = run.split(which)
    cfg = run.train_config
    if "predictions" in run.doc.get("eval", {}):
        P = np.asarray(_read_predictions(run.path("predictions", "eval"), records))
        y = label_matrix(records, P.shape[1], cfg.classifier_mode)
        reports = [compute_metrics(P, y, cfg.classifier_mode, scope="all"),
                   compute_metrics(P, y, cfg.classifier_mode, classes=range(1, P.shape[1]), scope="risk")]
    else:
        ckpt = load_checkpoint(run.path("checkpoint"))
        P, reports = evaluate(ckpt, records)
    run.write("predictions.csv", _predictions_csv(records, P))
    run.write("metrics.csv", metrics_csv(reports))
    run.write("metrics.json", json.dumps([r.to_dict() for r in reports], indent=1, sort_keys=True) + "\n")
    run.figure("per_class.svg", _per_class_figure(reports[0]))
    for r in reports:
        log.info("\n%s", r.table())


def cmd_explain(run: Run) -> None:
    """Explanations, dashboards and the match-rate curve."""
    opts = run.doc.get("explain", {})
    ckpt = load_checkpoint(run.path("checkpoint"))
    records = run.split(opts.get("split", "test"))
    tau = float(opts.get("tau_saliency", 0.3))
    top_k = opts.get("top_k")
    names = opts.get("class_names")
    n_dash = int(opts.get("dashboards", 3))
    explanations = []
    for i, rec in enumerate(records):
        e = explain(ckpt, rec, tau, top_k)
        explanations.append(e)
        run.write(f"explanations/{rec.record_id}.json", e.to_json())
        if i < n_dash:
            svg, doc = render_dashboard(e, rec, names)
            run.write(f"dashboards/{rec.record_id}.svg", svg)
            run.write(f"dashboards/{rec.record_id}.json", doc)
    refs = [a for a in (ReferenceAnnotation.from_record(r) for r in records) if a is not None]
    if not refs:
        log.info("no reference intervals in the dataset; skipping match rate")
        return
    tolerances = run.tolerances or opts.get("tolerances") or list(DEFAULT_TOLERANCES)
    curve = tolerance_sweep(explanations, refs, tolerances)
    run.write("match_rate.csv", match_rate_csv(curve))
    run.figure("match_rate.svg", match_rate_figure(curve))
    summary = {str(t): match_rate(explanations, refs, t).to_dict() for t, _ in curve}
    run.write("match_summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")


def cmd_sweep(run: Run) -> None:
    """One-factor-at-a-time sweep over a single config field."""
    opts = run.doc.get("sweep")
    if opts is None:
        raise ConfigError(["sweep: required by 'sweep' but missing"])
    spec = SweepSpec(opts["parameter"], tuple(opts.get("values", ())), run.train_config)
    rows = run_sweep(spec, run.split("train"), run.split("test"), jobs=run.jobs)
    run.write("sweep.csv", sweep_csv(rows))
    for metric, fig in sweep_figures(rows).items():
        run.figure(f"sweep_{metric}.svg", fig)


def cmd_bench(run: Run) -> None:
    """Parameter count, FLOP estimate and latency of one inference."""
    opts = run.doc.get("bench", {})
    ckpt = load_checkpoint(run.path("checkpoint"))
    records = run.split("test")
    idx = int(opts.get("record_index", 0))
    if idx >= len(records):
        raise ValueError(f"bench.record_index {idx} out of range for {len(records)} records")
    run.write("bench.json", json.dumps(profile(ckpt, records[idx], int(opts.get("repeats", 5))),
                                       indent=1, sort_keys=True) + "\n")


HANDLERS = {"synth": cmd_synth, "train": cmd_train, "fit": cmd_fit, "eval": cmd_eval,
            "explain": cmd_explain, "sweep": cmd_sweep, "bench": cmd_bench}


# ----------------------------------------------------------------- main

def _parse_tolerances(text: str) -> list[float]:
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad tolerance list {text!r}") from None
    if not vals or any(v < 0 for v in vals):
        raise argparse.ArgumentTypeError("tolerances must be a nonempty list of values >= 0")
    return vals


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vars-ecg", description="ECG graph representation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=(HANDLERS[name].__doc__ or name).strip().splitlines()[0])
        p.add_argument("--config", type=Path, help="run config JSON (optional for synth)")
        p.add_argument("--out", type=Path, required=True, help="output directory")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        p.add_argument("--jobs", type=int, default=1, help="worker processes for sweep points")
        p.add_argument("--tolerances", type=_parse_tolerances, help="match-rate tolerances, e.g. 0,0.5,1")
    return parser


def _error_line(exc: BaseException) -> str:
    msg = " ".join(str(exc).split())
    return json.dumps({"error": type(exc).__name__, "message": msg}, sort_keys=True)


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=os.environ.get("VARS_LOG", "WARNING").upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    started = time.perf_counter()
    try:
        if args.config is not None:
            try:
                doc = json.loads(args.config.read_text())
            except FileNotFoundError:
                raise ConfigError([f"config file not found: {args.config}"]) from None
            except json.JSONDecodeError as exc:
                raise ConfigError([f"config is not valid JSON: {exc}"]) from None
            base = args.config.resolve().parent
        elif args.command == "synth":
            doc, base = {}, Path.cwd()
        else:
            raise ConfigError([f"--config is required for '{args.command}'"])
        if args.seed is not None:
            doc = {**doc, "seed": args.seed}
        validate_config(doc)
        run = Run(args.command, doc, base, args.out, args.force, max(1, args.jobs), args.tolerances)
        run.prepare_out()
        HANDLERS[args.command](run)
        run.manifest(started)
    except ConfigError as exc:
        print(_error_line(exc), file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        log.debug("command failed", exc_info=True)
        print(_error_line(exc), file=sys.stderr)
        return EXIT_FAILURE
    return 0


if __name__ == "__main__":
    sys.exit(main())
