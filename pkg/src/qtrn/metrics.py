"""Evaluation metrics, prediction CSV I/O, and reporting.

The headline metric is the mean absolute percentage error over paths: every
(sample, path) pair counts once with equal weight, across the whole
evaluation set. Predictions travel as CSV files with columns
sample_id,path_id,predicted_delay,source; an ensemble is the per-path
arithmetic mean of aligned prediction sets. Reports break the error down by
named sample subsets and list unmatched ids instead of silently dropping
them.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from qtrn.net_model import NetworkSample

__all__ = [
    "EvalReport",
    "PredictionRecord",
    "ensemble",
    "evaluate",
    "mape",
    "read_predictions",
    "render_report",
    "write_predictions",
    "write_report",
]

CSV_HEADER = ("sample_id", "path_id", "predicted_delay", "source")


@dataclass(frozen=True)
class PredictionRecord:
    """One per-path delay prediction, keyed by (sample_id, path_id)."""

    sample_id: str
    path_id: int
    predicted_delay: float
    source: str

    @property
    def key(self) -> tuple[str, int]:
        return (self.sample_id, self.path_id)


def mape(predicted: Sequence[float] | np.ndarray, truth: Sequence[float] | np.ndarray) -> float:
    """Mean absolute percentage error, in percent.

    Raises ValueError on length mismatch, empty input, or any truth value
    that is not strictly positive (a percentage error is undefined there).
    """
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape or predicted.ndim != 1:
        raise ValueError(f"shape mismatch: predicted {predicted.shape}, truth {truth.shape}")
    if predicted.size == 0:
        raise ValueError("mape of an empty set is undefined")
    if np.any(~np.isfinite(truth)) or np.any(truth <= 0):
        raise ValueError("truth values must be finite and > 0")
    return float(100.0 * np.mean(np.abs(predicted - truth) / truth))


def write_predictions(records: Iterable[PredictionRecord], path: str | Path) -> Path:
    """Write prediction records as CSV, sorted by (sample_id, path_id)."""
    path = Path(path)
    rows = sorted(records, key=lambda r: r.key)
    with open(path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(CSV_HEADER)
        for rec in rows:
            writer.writerow([rec.sample_id, rec.path_id, repr(rec.predicted_delay), rec.source])
    return path


def read_predictions(path: str | Path) -> list[PredictionRecord]:
    """Read a prediction CSV; raises ValueError on a malformed header or row."""
    records = []
    with open(path, "r", newline="", encoding="utf-8") as fp:
        reader = csv.reader(fp)
        header = next(reader, None)
        if header is None or tuple(header) != CSV_HEADER:
            raise ValueError(f"{path}: expected header {','.join(CSV_HEADER)}, got {header}")
        for row_no, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise ValueError(f"{path}:{row_no}: expected 4 columns, got {len(row)}")
            try:
                records.append(
                    PredictionRecord(
                        sample_id=row[0],
                        path_id=int(row[1]),
                        predicted_delay=float(row[2]),
                        source=row[3],
                    )
                )
            except ValueError as exc:
                raise ValueError(f"{path}:{row_no}: {exc}") from exc
    return records


def _keyed(records: Iterable[PredictionRecord], what: str) -> dict[tuple[str, int], PredictionRecord]:
    out: dict[tuple[str, int], PredictionRecord] = {}
    for rec in records:
        if rec.key in out:
            raise ValueError(f"duplicate {what} for sample {rec.sample_id!r} path {rec.path_id}")
        out[rec.key] = rec
    return out


def ensemble(prediction_sets: Sequence[Iterable[PredictionRecord]]) -> list[PredictionRecord]:
    """Arithmetic per-path mean of two or more aligned prediction sets.

    Every set must cover exactly the same (sample_id, path_id) keys; a
    misalignment raises ValueError naming an offending key.
    """
    if len(prediction_sets) < 2:
        raise ValueError("ensemble needs at least two prediction sets")
    keyed = [_keyed(records, "prediction") for records in prediction_sets]
    base = set(keyed[0])
    for i, other in enumerate(keyed[1:], start=2):
        extra = set(other) - base
        missing = base - set(other)
        if extra or missing:
            example = sorted(extra or missing)[0]
            raise ValueError(
                f"prediction set {i} is misaligned: sample {example[0]!r} path {example[1]} "
                f"{'unexpected' if extra else 'missing'}"
            )
    out = []
    for key in sorted(base):
        mean = sum(k[key].predicted_delay for k in keyed) / len(keyed)
        out.append(
            PredictionRecord(
                sample_id=key[0], path_id=key[1], predicted_delay=mean, source="ensemble"
            )
        )
    return out


@dataclass(frozen=True)
class EvalReport:
    """MAPE broken down by subset, plus the ids that failed to match."""

    overall_mape: float
    n_paths: int
    subsets: tuple[tuple[str, float, int], ...]
    unmatched_predictions: tuple[tuple[str, int], ...]
    unmatched_labels: tuple[tuple[str, int], ...]

    def to_json_dict(self) -> dict:
        return {
            "overall": {"mape": self.overall_mape, "n_paths": self.n_paths},
            "subsets": {
                name: {"mape": value, "n_paths": n} for name, value, n in self.subsets
            },
            "unmatched_predictions": [list(k) for k in self.unmatched_predictions],
            "unmatched_labels": [list(k) for k in self.unmatched_labels],
        }


def evaluate(
    predictions: Iterable[PredictionRecord],
    samples: Iterable[NetworkSample],
    subsets: Mapping[str, str] | None = None,
) -> EvalReport:
    """Score predictions against labeled samples.

    subsets maps sample_id to a subset name; unmapped samples fall into
    "other" when a mapping is given. Raises ValueError when nothing matches
    or a matched label is not positive.
    """
    preds = _keyed(predictions, "prediction")
    labels: dict[tuple[str, int], float] = {}
    subset_of: dict[str, str] = {}
    for sample in samples:
        for path in sample.paths:
            if path.label_delay is not None:
                labels[(sample.sample_id, path.id)] = path.label_delay
        if subsets is not None:
            subset_of[sample.sample_id] = subsets.get(sample.sample_id, "other")

    matched = sorted(set(preds) & set(labels))
    if not matched:
        raise ValueError("no prediction matches any labeled path")
    predicted = [preds[k].predicted_delay for k in matched]
    truth = [labels[k] for k in matched]
    overall = mape(predicted, truth)

    subset_rows: list[tuple[str, float, int]] = []
    if subsets is not None:
        by_name: dict[str, list[tuple[str, int]]] = {}
        for key in matched:
            by_name.setdefault(subset_of[key[0]], []).append(key)
        for name in sorted(by_name):
            keys = by_name[name]
            subset_rows.append(
                (name, mape([preds[k].predicted_delay for k in keys], [labels[k] for k in keys]), len(keys))
            )

    return EvalReport(
        overall_mape=overall,
        n_paths=len(matched),
        subsets=tuple(subset_rows),
        unmatched_predictions=tuple(sorted(set(preds) - set(labels))),
        unmatched_labels=tuple(sorted(set(labels) - set(preds))),
    )


def render_report(report: EvalReport) -> str:
    """Fixed-layout text rendering of a report (deterministic)."""
    lines = [f"overall MAPE: {report.overall_mape:.4f}%  ({report.n_paths} paths)"]
    for name, value, n in report.subsets:
        lines.append(f"  subset {name}: {value:.4f}%  ({n} paths)")
    if report.unmatched_predictions:
        lines.append(f"unmatched predictions: {len(report.unmatched_predictions)}")
        for sample_id, path_id in report.unmatched_predictions[:10]:
            lines.append(f"  {sample_id}/{path_id}")
        if len(report.unmatched_predictions) > 10:
            lines.append("  ...")
    if report.unmatched_labels:
        lines.append(f"unmatched labels: {len(report.unmatched_labels)}")
        for sample_id, path_id in report.unmatched_labels[:10]:
            lines.append(f"  {sample_id}/{path_id}")
        if len(report.unmatched_labels) > 10:
            lines.append("  ...")
    return "\n".join(lines) + "\n"


def write_report(report: EvalReport, path: str | Path) -> Path:
    """Write a report as deterministic JSON."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(report.to_json_dict(), fp, indent=2, sort_keys=True)
        fp.write("\n")
    return path
