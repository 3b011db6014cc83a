"""Command line interface for the batch pipeline.

Subcommands: convert (dataset to graph bundles), baseline (queueing
predictions to CSV), simulate (event simulation, optionally labeling
samples), evaluate (score predictions against labels), ensemble (average
prediction CSVs) and export-graphs (bundles that reuse existing feature
statistics). Defaults can come from a JSON config file (--config); explicit
flags always win. The QTRN_LOG environment variable sets the log level by
name, and repeated -v raises verbosity further. Every subcommand is
idempotent: identical inputs, flags and seeds produce identical outputs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from qtrn import metrics, sim_oracle
from qtrn.feature_pipeline import convert_dataset
from qtrn.net_model import NetworkSample, dump_sample, iter_samples
from qtrn.qt_engine import (
    QTConfig,
    extract_features,
    write_feature_csvs,
    write_feature_manifest,
)

__all__ = ["main"]

logger = logging.getLogger(__name__)

_CONFIG_KEYS = {
    "iterations",
    "pb_init",
    "x_mode",
    "variant",
    "workers",
    "seed",
    "sim_time",
    "warmup",
    "packet_size_mode",
}


def _setup_logging(verbosity: int) -> None:
    env = os.environ.get("QTRN_LOG", "").strip().upper()
    level = logging.WARNING
    if env:
        level = getattr(logging, env, None)
        if not isinstance(level, int):
            raise SystemExit(f"QTRN_LOG has unknown level {env!r}")
    if verbosity == 1:
        level = min(level, logging.INFO)
    elif verbosity >= 2:
        level = min(level, logging.DEBUG)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path, "r", encoding="utf-8") as fp:
            config = json.load(fp)
    except (OSError, json.JSONDecodeError) as exc:
        raise SystemExit(f"cannot read config {path}: {exc}")
    if not isinstance(config, dict):
        raise SystemExit(f"config {path} must be a JSON object")
    unknown = set(config) - _CONFIG_KEYS
    if unknown:
        raise SystemExit(f"config {path} has unknown keys: {sorted(unknown)}")
    return config


def _resolve(args: argparse.Namespace, config: dict, key: str, default):
    """Flag value if given, else config value, else the hard default."""
    value = getattr(args, key, None)
    if value is not None:
        return value
    return config.get(key, default)


def _qt_config(args: argparse.Namespace, config: dict, variant: str) -> QTConfig:
    iterations = _resolve(args, config, "iterations", None)
    if iterations is None:
        iterations = QTConfig.for_variant(variant).num_iterations
    return QTConfig.for_variant(
        variant,
        num_iterations=int(iterations),
        pb_init=_resolve(args, config, "pb_init", 0.3),
        x_mode=_resolve(args, config, "x_mode", "pi0"),
    )


def _iter_input_samples(input_path: str):
    path = Path(input_path)
    if path.is_dir():
        files = sorted(path.glob("*.jsonl"))
        if not files:
            raise SystemExit(f"no .jsonl files under {path}")
        for file in files:
            yield from iter_samples(file)
    else:
        yield from iter_samples(path)


def _cmd_convert(args: argparse.Namespace, config: dict) -> int:
    variant = _resolve(args, config, "variant", "m1")
    report = convert_dataset(
        args.input,
        args.output,
        variant=variant,
        workers=int(_resolve(args, config, "workers", 1)),
        cfg=_qt_config(args, config, variant),
        stats_from=args.stats,
    )
    print(
        f"converted {report.n_converted} samples ({report.n_failed} failures) "
        f"in {report.wall_time_s:.2f}s -> {report.output_dir}"
    )
    for where, error in report.failures:
        print(f"  failed {where}: {error}", file=sys.stderr)
    return 0


def _cmd_baseline(args: argparse.Namespace, config: dict) -> int:
    variant = _resolve(args, config, "variant", "m1")
    cfg = _qt_config(args, config, variant)
    records = []
    sample_ids = []
    for sample in _iter_input_samples(args.input):
        features = extract_features(sample, variant=variant, cfg=cfg)
        sample_ids.append(sample.sample_id)
        records.extend(
            metrics.PredictionRecord(
                sample_id=sample.sample_id,
                path_id=pid,
                predicted_delay=float(delay),
                source="baseline",
            )
            for pid, delay in zip(features.path_ids, features.b_path)
        )
        if args.features_dir:
            write_feature_csvs(sample, args.features_dir, variant=variant, cfg=cfg)
    metrics.write_predictions(records, args.output)
    if args.features_dir:
        write_feature_manifest(args.features_dir, sample_ids, variant)
    print(f"wrote {len(records)} baseline predictions -> {args.output}")
    return 0


def _cmd_simulate(args: argparse.Namespace, config: dict) -> int:
    seed = int(_resolve(args, config, "seed", 0))
    sim_time = float(_resolve(args, config, "sim_time", 10000.0))
    warmup = float(_resolve(args, config, "warmup", 0.05))
    size_mode = _resolve(args, config, "packet_size_mode", "exponential")

    results = []
    labeled: list[NetworkSample] = []
    for i, sample in enumerate(_iter_input_samples(args.input)):
        cfg = sim_oracle.SimConfig(
            sim_time=sim_time, warmup_frac=warmup, seed=seed + i, packet_size_mode=size_mode
        )
        result = sim_oracle.simulate(sample, cfg)
        results.append(result)
        if args.label:
            labeled.append(sim_oracle.label_sample(sample, result))
        print(
            f"{sample.sample_id}: {result.events} events, {result.delivered} delivered, "
            f"{result.dropped} dropped"
        )
    if args.results:
        sim_oracle.write_results(results, args.results)
        print(f"wrote results -> {args.results}")
    if args.label:
        with open(args.label, "w", encoding="utf-8") as fp:
            for sample in labeled:
                dump_sample(sample, fp)
        print(f"wrote {len(labeled)} labeled samples -> {args.label}")
    return 0


def _cmd_evaluate(args: argparse.Namespace, config: dict) -> int:
    predictions = metrics.read_predictions(args.predictions)
    samples = list(_iter_input_samples(args.labels))
    subsets = None
    if args.subsets:
        with open(args.subsets, "r", encoding="utf-8") as fp:
            subsets = json.load(fp)
        if not isinstance(subsets, dict):
            raise SystemExit(f"subsets file {args.subsets} must map sample_id to subset name")
    report = metrics.evaluate(predictions, samples, subsets=subsets)
    sys.stdout.write(metrics.render_report(report))
    if args.out:
        metrics.write_report(report, args.out)
    return 0


def _cmd_ensemble(args: argparse.Namespace, config: dict) -> int:
    sets = [metrics.read_predictions(path) for path in args.inputs]
    merged = metrics.ensemble(sets)
    metrics.write_predictions(merged, args.output)
    print(f"wrote {len(merged)} ensemble predictions -> {args.output}")
    return 0


def _cmd_export_graphs(args: argparse.Namespace, config: dict) -> int:
    variant = _resolve(args, config, "variant", "m1")
    report = convert_dataset(
        args.input,
        args.output,
        variant=variant,
        workers=int(_resolve(args, config, "workers", 1)),
        cfg=_qt_config(args, config, variant),
        stats_from=args.stats,
    )
    print(
        f"exported {report.n_converted} graph bundles ({report.n_failed} failures) "
        f"-> {report.output_dir}"
    )
    for where, error in report.failures:
        print(f"  failed {where}: {error}", file=sys.stderr)
    return 0


def _add_qt_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--variant", choices=("m1", "m2"), default=None, help="feature variant")
    parser.add_argument("--iterations", type=int, default=None, help="traffic-balance rounds")
    parser.add_argument("--pb-init", dest="pb_init", type=float, default=None, help="initial blocking guess")
    parser.add_argument(
        "--x-mode", dest="x_mode", choices=("one", "pi0"), default=None, help="delay factor extra term"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qtrn", description="Per-path network delay prediction pipeline."
    )
    parser.add_argument("--config", default=None, help="JSON file with flag defaults")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="raise log verbosity")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convert", help="convert a JSONL dataset into graph bundles")
    p.add_argument("input", help="JSONL file or directory of .jsonl files")
    p.add_argument("output", help="output dataset directory")
    _add_qt_flags(p)
    p.add_argument("--workers", type=int, default=None, help="parallel conversion workers")
    p.add_argument("--stats", default=None, help="reuse an existing stats.json instead of fitting")
    p.set_defaults(func=_cmd_convert)

    p = sub.add_parser("baseline", help="write queueing-baseline delay predictions")
    p.add_argument("input", help="JSONL file or directory")
    p.add_argument("output", help="predictions CSV path")
    _add_qt_flags(p)
    p.add_argument("--features-dir", default=None, help="also export per-sample feature CSVs here")
    p.set_defaults(func=_cmd_baseline)

    p = sub.add_parser("simulate", help="run the event simulator over samples")
    p.add_argument("input", help="JSONL file or directory")
    p.add_argument("--seed", type=int, default=None, help="base RNG seed (per-sample seeds increment)")
    p.add_argument("--sim-time", dest="sim_time", type=float, default=None, help="generation horizon")
    p.add_argument("--warmup", type=float, default=None, help="warmup fraction discarded")
    p.add_argument(
        "--packet-size-mode",
        dest="packet_size_mode",
        choices=("exponential", "deterministic"),
        default=None,
    )
    p.add_argument("--results", default=None, help="write measurement JSON here")
    p.add_argument("--label", default=None, help="write labeled samples JSONL here")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("evaluate", help="score a prediction CSV against labeled samples")
    p.add_argument("--predictions", required=True, help="prediction CSV")
    p.add_argument("--labels", required=True, help="labeled JSONL file or directory")
    p.add_argument("--subsets", default=None, help="JSON mapping sample_id to subset name")
    p.add_argument("--out", default=None, help="write the report JSON here")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("ensemble", help="average two or more aligned prediction CSVs")
    p.add_argument("inputs", nargs="+", help="prediction CSVs")
    p.add_argument("--out", dest="output", required=True, help="output CSV")
    p.set_defaults(func=_cmd_ensemble)

    p = sub.add_parser("export-graphs", help="export graph bundles reusing existing statistics")
    p.add_argument("input", help="JSONL file or directory")
    p.add_argument("output", help="output dataset directory")
    _add_qt_flags(p)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--stats", default=None, help="stats.json to apply (fit on input when omitted)")
    p.set_defaults(func=_cmd_export_graphs)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _setup_logging(args.verbose)
    config = _load_config(args.config)
    try:
        return args.func(args, config)
    except (OSError, ValueError, RuntimeError) as exc:
        logger.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
