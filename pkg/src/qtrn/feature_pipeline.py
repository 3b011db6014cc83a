"""Raw feature transforms, standardization, and dataset conversion.

The transform stage rescales every sample into self-relative units: each
path's traffic attributes are divided by that path's own average packet
rate (its cumulative-count column is zeroed, carrying no signal), and each
link's capacity is divided by the mean average packet rate of the paths that
cross it, so the model sees "capacity per unit of offered demand" rather
than raw magnitudes. Queueing baseline features are exempt: they stay in
physical units end to end.

Standardization is per column within each entity type, fitted on a training
stream with a numerically stable streaming-moment accumulator (chunks are
combined with the parallel-variance rule in a fixed order, so refits are
bit-identical). Zero-variance columns are passed through unscaled and
flagged. Fitted statistics persist as a deterministic JSON artifact.

convert_dataset drives the whole batch pipeline: validate and fit on a first
sequential pass, then transform / run the queueing baseline / build graphs /
write bundles in a parallel second pass. Per-sample failures are isolated
and reported; they never abort the run. All outputs (manifest, stats,
bundles) are byte-identical regardless of worker count.
"""

from __future__ import annotations

import concurrent.futures
import json
import logging
import re
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from qtrn.hetero_graph import (
    FeatureRows,
    GraphBundle,
    HiddenWidths,
    build_graph,
    write_bundle,
)
from qtrn.net_model import (
    NetworkSample,
    SampleError,
    parse_sample,
    validate_sample,
)
from qtrn.qt_engine import QTConfig, extract_features

__all__ = [
    "ConversionReport",
    "DEFAULT_HIDDEN_WIDTHS",
    "FeatureError",
    "PATH_FEATURE_COLUMNS",
    "Standardizer",
    "build_sample_bundle",
    "convert_dataset",
    "fit_standardizer",
    "transform_raw",
]

logger = logging.getLogger(__name__)

PATH_FEATURE_COLUMNS = ("avg_pkts_lambda", "eq_lambda", "avg_bw", "pkts_gen", "total_pkts_gen")
LINK_FEATURE_COLUMNS = ("capacity_per_demand",)
NODE_FEATURE_COLUMNS = ("zero",)

# Hidden-state widths the downstream models expect, recorded in each bundle.
DEFAULT_HIDDEN_WIDTHS = {
    "m1": HiddenWidths(path=64, link=64, node=64),
    "m2": HiddenWidths(path=8, link=8, node=0),
}

_SAFE_ID = re.compile(r"^[A-Za-z0-9._-]+$")


class FeatureError(ValueError):
    """Raised when a sample cannot be transformed into model features."""


def transform_raw(sample: NetworkSample) -> FeatureRows:
    """Rescale one sample's raw attributes into self-relative features.

    Path rows hold the five traffic attributes divided by that path's
    avg_pkts_lambda, with the total_pkts_gen column zeroed. Link rows hold
    capacity divided by the mean avg_pkts_lambda over crossing paths (the
    sample-wide mean when nothing crosses the link). Node rows are a single
    zero column. Raises FeatureError when a path's avg_pkts_lambda is zero.
    """
    n_paths, n_links = len(sample.paths), len(sample.links)
    path_rows = np.zeros((n_paths, len(PATH_FEATURE_COLUMNS)), dtype=np.float64)
    lambdas = np.zeros(n_paths, dtype=np.float64)
    for i, path in enumerate(sample.paths):
        lam = path.traffic.avg_pkts_lambda
        if lam <= 0:
            raise FeatureError(
                f"avg_pkts_lambda must be > 0 to normalize features "
                f"(path {path.id} in sample {sample.sample_id!r} has {lam})"
            )
        lambdas[i] = lam
        path_rows[i] = np.asarray(path.traffic.as_row(), dtype=np.float64) / lam
        path_rows[i, 4] = 0.0

    rows = sample.link_index()
    crossing_sums = np.zeros(n_links, dtype=np.float64)
    crossing_counts = np.zeros(n_links, dtype=np.int64)
    for i, path in enumerate(sample.paths):
        for lid in set(path.link_seq):
            crossing_sums[rows[lid]] += lambdas[i]
            crossing_counts[rows[lid]] += 1

    sample_mean = float(lambdas.mean()) if n_paths else 1.0
    link_rows = np.zeros((n_links, 1), dtype=np.float64)
    for i, link in enumerate(sample.links):
        denom = crossing_sums[i] / crossing_counts[i] if crossing_counts[i] else sample_mean
        link_rows[i, 0] = link.capacity / denom

    node_rows = np.zeros((sample.n_nodes, 1), dtype=np.float64)
    return FeatureRows(path_rows=path_rows, link_rows=link_rows, node_rows=node_rows)


class _Moments:
    """Streaming per-column moments, combined with the parallel-variance rule."""

    def __init__(self, n_cols: int) -> None:
        self.n = 0
        self.mean = np.zeros(n_cols, dtype=np.float64)
        self.m2 = np.zeros(n_cols, dtype=np.float64)

    def update(self, rows: np.ndarray) -> None:
        cn = rows.shape[0]
        if cn == 0:
            return
        cmean = rows.mean(axis=0)
        cm2 = ((rows - cmean) ** 2).sum(axis=0)
        if self.n == 0:
            self.n, self.mean, self.m2 = cn, cmean, cm2
            return
        total = self.n + cn
        delta = cmean - self.mean
        self.mean = self.mean + delta * (cn / total)
        self.m2 = self.m2 + cm2 + delta**2 * (self.n * cn / total)
        self.n = total

    def finalize(self) -> tuple[np.ndarray, np.ndarray]:
        if self.n == 0:
            raise FeatureError("no rows accumulated; cannot fit statistics")
        return self.mean, np.sqrt(self.m2 / self.n)


@dataclass(frozen=True)
class Standardizer:
    """Per-entity, per-column standardization statistics.

    Columns whose standard deviation is (numerically) zero are flagged and
    passed through unscaled. Statistics round-trip exactly through JSON.
    """

    mean: dict[str, np.ndarray]
    std: dict[str, np.ndarray]
    passthrough: dict[str, np.ndarray]

    ENTITIES = ("path", "link", "node")
    COLUMNS = {
        "path": PATH_FEATURE_COLUMNS,
        "link": LINK_FEATURE_COLUMNS,
        "node": NODE_FEATURE_COLUMNS,
    }

    def apply(self, feature_rows: FeatureRows) -> FeatureRows:
        """Standardize transformed rows; passthrough columns are untouched."""
        out = {}
        for entity, rows in (
            ("path", feature_rows.path_rows),
            ("link", feature_rows.link_rows),
            ("node", feature_rows.node_rows),
        ):
            rows = np.asarray(rows, dtype=np.float64)
            scaled = np.where(
                self.passthrough[entity],
                rows,
                (rows - self.mean[entity]) / np.where(self.passthrough[entity], 1.0, self.std[entity]),
            )
            out[entity] = scaled
        return FeatureRows(path_rows=out["path"], link_rows=out["link"], node_rows=out["node"])

    def to_json(self) -> str:
        payload = {
            "format_version": 1,
            "entities": {
                entity: {
                    "columns": list(self.COLUMNS[entity]),
                    "mean": [float(v) for v in self.mean[entity]],
                    "std": [float(v) for v in self.std[entity]],
                    "passthrough": [bool(v) for v in self.passthrough[entity]],
                }
                for entity in self.ENTITIES
            },
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Standardizer":
        payload = json.loads(text)
        mean, std, passthrough = {}, {}, {}
        for entity in cls.ENTITIES:
            block = payload["entities"][entity]
            mean[entity] = np.asarray(block["mean"], dtype=np.float64)
            std[entity] = np.asarray(block["std"], dtype=np.float64)
            passthrough[entity] = np.asarray(block["passthrough"], dtype=bool)
        return cls(mean=mean, std=std, passthrough=passthrough)

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.write_text(self.to_json(), encoding="utf-8")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Standardizer":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def fit_standardizer(samples: Iterable[NetworkSample]) -> Standardizer:
    """Fit per-entity column statistics over a stream of samples.

    Requires at least two samples (a single snapshot cannot anchor dataset
    statistics). Processes one sample at a time; memory stays flat.
    """
    accs = {
        "path": _Moments(len(PATH_FEATURE_COLUMNS)),
        "link": _Moments(len(LINK_FEATURE_COLUMNS)),
        "node": _Moments(len(NODE_FEATURE_COLUMNS)),
    }
    n_samples = 0
    for sample in samples:
        rows = transform_raw(sample)
        accs["path"].update(rows.path_rows)
        accs["link"].update(rows.link_rows)
        accs["node"].update(rows.node_rows)
        n_samples += 1
    if n_samples < 2:
        raise FeatureError(f"fitting statistics needs at least 2 samples, got {n_samples}")

    mean, std, passthrough = {}, {}, {}
    for entity, acc in accs.items():
        m, s = acc.finalize()
        flag = s <= 1e-12 * np.maximum(1.0, np.abs(m))
        mean[entity], std[entity], passthrough[entity] = m, s, flag
        if flag.any():
            names = [c for c, f in zip(Standardizer.COLUMNS[entity], flag) if f]
            logger.debug("passthrough (zero variance) %s columns: %s", entity, names)
    return Standardizer(mean=mean, std=std, passthrough=passthrough)


def build_sample_bundle(
    sample: NetworkSample,
    standardizer: Standardizer,
    variant: str = "m1",
    cfg: QTConfig | None = None,
    hidden_widths: HiddenWidths | None = None,
) -> GraphBundle:
    """Run the full per-sample pipeline: transform, baseline, graph, bundle."""
    cfg = cfg or QTConfig.for_variant(variant)
    hidden_widths = hidden_widths or DEFAULT_HIDDEN_WIDTHS[variant]
    feature_rows = standardizer.apply(transform_raw(sample))
    graph = build_graph(sample, feature_rows, hidden_widths)
    qt = extract_features(sample, variant=variant, cfg=cfg)
    labels = np.array(
        [p.label_delay if p.label_delay is not None else np.nan for p in sample.paths],
        dtype=np.float64,
    )
    return GraphBundle(
        sample_id=sample.sample_id,
        variant=variant,
        graph=graph,
        b_link=qt.b_link,
        b_path=qt.b_path,
        link_capacity=np.array([l.capacity for l in sample.links], dtype=np.float64),
        link_queue_size_bits=np.array([l.queue_size_bits for l in sample.links], dtype=np.float64),
        link_buffer_pkts=np.array([l.buffer_pkts for l in sample.links], dtype=np.int64),
        link_ids=np.array([l.id for l in sample.links], dtype=np.int64),
        path_ids=np.array([p.id for p in sample.paths], dtype=np.int64),
        labels=labels,
    )


@dataclass(frozen=True)
class ConversionReport:
    """Outcome of one convert_dataset run; wall time is not written to disk."""

    output_dir: Path
    n_converted: int
    n_failed: int
    failures: tuple[tuple[str, str], ...]
    wall_time_s: float
    manifest_path: Path
    stats_path: Path


def _input_files(input_path: str | Path) -> list[Path]:
    input_path = Path(input_path)
    if input_path.is_file():
        return [input_path]
    files = sorted(input_path.glob("*.jsonl"))
    if not files:
        raise FileNotFoundError(f"no .jsonl files under {input_path}")
    return files


def _iter_lines(files: list[Path]) -> Iterator[tuple[str, int, str]]:
    for file in files:
        with open(file, "r", encoding="utf-8") as fp:
            for line_no, line in enumerate(fp, start=1):
                if line.strip():
                    yield file.name, line_no, line


def _parse_and_check(line: str, line_no: int) -> NetworkSample:
    sample = parse_sample(line, line_no=line_no)
    validate_sample(sample)
    if not _SAFE_ID.match(sample.sample_id):
        raise FeatureError(
            f"sample_id {sample.sample_id!r} is not filesystem-safe "
            "(allowed: letters, digits, dot, underscore, dash)"
        )
    return sample


def _convert_one(
    line: str,
    line_no: int,
    standardizer: Standardizer,
    variant: str,
    cfg: QTConfig,
    hidden_widths: HiddenWidths,
    samples_dir: str,
) -> str:
    """Worker body: one line in, one bundle file out; returns the sample id."""
    sample = _parse_and_check(line, line_no)
    bundle = build_sample_bundle(sample, standardizer, variant, cfg, hidden_widths)
    write_bundle(bundle, Path(samples_dir) / f"{sample.sample_id}.bundle")
    return sample.sample_id


def convert_dataset(
    input_path: str | Path,
    output_dir: str | Path,
    variant: str = "m1",
    workers: int = 1,
    cfg: QTConfig | None = None,
    hidden_widths: HiddenWidths | None = None,
    stats_from: str | Path | None = None,
) -> ConversionReport:
    """Convert a JSON-Lines dataset into a directory of graph bundles.

    input_path is one .jsonl file or a directory of them (read in name
    order). The output directory receives manifest.json, stats.json and
    samples/<sample_id>.bundle. Statistics are fitted on the input unless
    stats_from points at an existing stats.json (use that for validation and
    test splits so they share the training scale).

    Per-sample failures (parse, validation, transform, duplicate or unsafe
    ids) are recorded in the manifest and the returned report; the run keeps
    going. Output bytes are invariant under the worker count.
    """
    if variant not in DEFAULT_HIDDEN_WIDTHS:
        raise ValueError(f"variant must be one of {tuple(DEFAULT_HIDDEN_WIDTHS)}, got {variant!r}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    cfg = cfg or QTConfig.for_variant(variant)
    hidden_widths = hidden_widths or DEFAULT_HIDDEN_WIDTHS[variant]
    started = time.monotonic()

    files = _input_files(input_path)
    output_dir = Path(output_dir)
    samples_dir = output_dir / "samples"
    samples_dir.mkdir(parents=True, exist_ok=True)

    failures: list[tuple[str, str]] = []
    good: list[tuple[str, int, str]] = []
    seen_ids: set[str] = set()
    fitting = stats_from is None
    accs = None
    if fitting:
        accs = {
            "path": _Moments(len(PATH_FEATURE_COLUMNS)),
            "link": _Moments(len(LINK_FEATURE_COLUMNS)),
            "node": _Moments(len(NODE_FEATURE_COLUMNS)),
        }

    for file_name, line_no, line in _iter_lines(files):
        where = f"{file_name}:{line_no}"
        try:
            sample = _parse_and_check(line, line_no)
            if sample.sample_id in seen_ids:
                raise FeatureError(f"duplicate sample_id {sample.sample_id!r}")
            seen_ids.add(sample.sample_id)
            if fitting:
                rows = transform_raw(sample)
                accs["path"].update(rows.path_rows)
                accs["link"].update(rows.link_rows)
                accs["node"].update(rows.node_rows)
            else:
                transform_raw(sample)  # surface transform errors in pass 1
        except (SampleError, FeatureError) as exc:
            failures.append((where, str(exc)))
            continue
        good.append((file_name, line_no, line))

    if fitting:
        if len(good) < 2:
            raise FeatureError(f"fitting statistics needs at least 2 usable samples, got {len(good)}")
        mean, std, passthrough = {}, {}, {}
        for entity, acc in accs.items():
            m, s = acc.finalize()
            flag = s <= 1e-12 * np.maximum(1.0, np.abs(m))
            mean[entity], std[entity], passthrough[entity] = m, s, flag
        standardizer = Standardizer(mean=mean, std=std, passthrough=passthrough)
    else:
        standardizer = Standardizer.load(stats_from)
    stats_path = standardizer.save(output_dir / "stats.json")

    converted: list[str] = []
    if workers == 1:
        for file_name, line_no, line in good:
            try:
                converted.append(
                    _convert_one(line, line_no, standardizer, variant, cfg, hidden_widths, str(samples_dir))
                )
            except Exception as exc:  # per-sample isolation
                failures.append((f"{file_name}:{line_no}", str(exc)))
    else:
        with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {
                pool.submit(
                    _convert_one, line, line_no, standardizer, variant, cfg, hidden_widths, str(samples_dir)
                ): (file_name, line_no)
                for file_name, line_no, line in good
            }
            for future in concurrent.futures.as_completed(futures):
                file_name, line_no = futures[future]
                try:
                    converted.append(future.result())
                except Exception as exc:
                    failures.append((f"{file_name}:{line_no}", str(exc)))

    manifest = {
        "format_version": 1,
        "variant": variant,
        "baseline": {
            "num_iterations": cfg.num_iterations,
            "pb_init": cfg.pb_init,
            "x_mode": cfg.x_mode,
        },
        "hidden_widths": {
            "path": hidden_widths.path,
            "link": hidden_widths.link,
            "node": hidden_widths.node,
        },
        "n_samples": len(converted),
        "samples": sorted(converted),
        "failures": [
            {"where": where, "error": error} for where, error in sorted(failures)
        ],
        "stats_file": "stats.json",
    }
    manifest_path = output_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fp:
        json.dump(manifest, fp, indent=2, sort_keys=True)
        fp.write("\n")

    wall = time.monotonic() - started
    logger.info(
        "converted %d samples (%d failures) into %s in %.2fs",
        len(converted),
        len(failures),
        output_dir,
        wall,
    )
    return ConversionReport(
        output_dir=output_dir,
        n_converted=len(converted),
        n_failed=len(failures),
        failures=tuple(sorted(failures)),
        wall_time_s=wall,
        manifest_path=manifest_path,
        stats_path=stats_path,
    )
