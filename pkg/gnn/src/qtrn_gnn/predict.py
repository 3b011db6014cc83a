"""Checkpoint loading and prediction export.

Predictions go out in the shared CSV schema (sample_id, path_id,
predicted_delay, source) with floats written via repr so files round-trip
exactly and identical runs produce identical bytes. The writer here is a
deliberate reimplementation of that file contract; the only coupling to
the producing side is the format itself.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import torch

from .bundles import Dataset, load_dataset
from .model import DelayFineTuner, model_from_payload, prepare

CSV_HEADER = ("sample_id", "path_id", "predicted_delay", "source")


@dataclass(frozen=True)
class PredictionRow:
    sample_id: str
    path_id: int
    predicted_delay: float


def load_checkpoint(path: str | Path) -> tuple[DelayFineTuner, dict]:
    """Load a checkpoint file; returns the model in eval mode plus its payload."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ValueError(f"incompatible checkpoint: {path} is not readable ({exc})") from exc
    model = model_from_payload(payload)
    model.eval()
    return model, payload


def predict_dataset(model: DelayFineTuner, dataset: Dataset) -> list[PredictionRow]:
    """Run the model over every sample; every path gets a prediction."""
    rows = []
    with torch.no_grad():
        for bundle in dataset.bundles:
            g = prepare(bundle, model.spec)
            pred = model(g)
            for i in range(g.n_paths):
                rows.append(
                    PredictionRow(
                        sample_id=g.sample_id,
                        path_id=int(g.path_ids[i]),
                        predicted_delay=float(pred[i]),
                    )
                )
    return rows


def write_predictions(rows: Iterable[PredictionRow], path: str | Path, source: str) -> Path:
    """Write prediction rows as CSV, sorted by (sample_id, path_id)."""
    path = Path(path)
    ordered = sorted(rows, key=lambda r: (r.sample_id, r.path_id))
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(CSV_HEADER)
        for row in ordered:
            writer.writerow([row.sample_id, row.path_id, repr(row.predicted_delay), source])
    return path


def predict_to_csv(
    checkpoint: str | Path, dataset_dir: str | Path, out_path: str | Path, source: str | None = None
) -> Path:
    """End-to-end: load checkpoint, predict a converted dataset, write CSV."""
    model, payload = load_checkpoint(checkpoint)
    dataset = load_dataset(dataset_dir)
    if dataset.variant != model.spec.variant:
        raise ValueError(
            f"checkpoint is variant {model.spec.variant!r}, dataset is {dataset.variant!r}"
        )
    rows = predict_dataset(model, dataset)
    label = source if source is not None else f"gnn-{model.spec.variant}"
    return write_predictions(rows, out_path, label)
