from __future__ import annotations

import numpy as np

from vars_ecg.signal import EcgRecord
from vars_ecg.train import TrainConfig


def small_config(**kw) -> TrainConfig:
    base = dict(hidden=8, num_heads=2, batch_size=4, epochs=1, head_epochs=20)
    base.update(kw)
    return TrainConfig(**base)


def random_record(rng: np.random.Generator, n_leads: int = 2, n_samples: int = 200, rate: int = 100,
                  record_id: str = "r", label: int | None = 0) -> EcgRecord:
    return EcgRecord(rng.normal(size=(n_leads, n_samples)), rate, record_id, label)


def tiny_run_config(per_class: int = 4, **train) -> dict:
    """A run config small enough for the full CLI pipeline to finish in seconds."""
    base = dict(hidden=8, num_heads=2, batch_size=4, epochs=1, head_epochs=20)
    base.update(train)
    classes = [{"name": "normal", "count": per_class},
               {"name": "wide_qrs", "count": per_class, "anomalies": [{"kind": "wide_qrs"}]},
               {"name": "st_elevation", "count": per_class, "anomalies": [{"kind": "st_elevation"}]}]
    return {"seed": 1, "train": base, "synth": {"classes": classes},
            "data": {"manifest": "data/manifest.json", "train_fraction": 0.5},
            "checkpoint": "fit/checkpoint.bin", "explain": {"dashboards": 2}}


PIPELINE = ("synth", "train", "fit", "eval", "explain")


def run_pipeline(root, doc: dict) -> dict[str, int]:
    """Write ``doc`` under ``root`` and run synth through explain; returns exit codes."""
    import json

    from vars_ecg.cli import main

    root.mkdir(parents=True, exist_ok=True)
    cfg = root / "run.json"
    cfg.write_text(json.dumps(doc))
    codes = {}
    for cmd in PIPELINE:
        out = {"synth": "data", "train": "train", "fit": "fit"}.get(cmd, cmd)
        if cmd == "fit":
            # fit reads the pretrained checkpoint, then the later steps read the fitted one
            stage = {**doc, "checkpoint": "train/checkpoint.bin"}
            (root / "fit.json").write_text(json.dumps(stage))
            codes[cmd] = main([cmd, "--config", str(root / "fit.json"), "--out", str(root / out)])
        else:
            codes[cmd] = main([cmd, "--config", str(cfg), "--out", str(root / out)])
    return codes
