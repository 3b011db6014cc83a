"""Helpers for the fine-tuning tests.

Datasets are produced through the delay toolkit's command line, never by
importing it: the converted directories and labeled JSONL files on disk
are the only interface the fine-tuning package is allowed to rely on.
"""

from __future__ import annotations

import json
import subprocess
import sys
from pathlib import Path


def traffic(rate: float) -> dict:
    lam = rate
    return {
        "avg_pkts_lambda": lam,
        "eq_lambda": lam * 1.1,
        "avg_bw": lam * 1000.0,
        "pkts_gen": rate,
        "total_pkts_gen": lam * 500.0,
    }


def line_record(
    sample_id: str,
    n_nodes: int,
    through_rate: float,
    fresh_rates: list[float],
    capacity: float = 100000.0,
    buffer_pkts: int = 8,
    queue_size_bits: float = 8000.0,
) -> dict:
    """Line topology: one end-to-end path plus one fresh path per link.

    The default scale (100 kbit/s links, 8-packet buffers of 1000-bit
    packets) keeps baseline delay factors in the 0.2..0.6 range, where
    the sigmoid head has healthy gradients.
    """
    links = [
        {
            "id": i,
            "src": i,
            "dst": i + 1,
            "capacity": capacity,
            "buffer_pkts": buffer_pkts,
            "queue_size_bits": queue_size_bits,
        }
        for i in range(n_nodes - 1)
    ]
    paths = [{"id": 0, "link_seq": [l["id"] for l in links], "traffic": traffic(through_rate)}]
    for i, rate in enumerate(fresh_rates):
        paths.append({"id": i + 1, "link_seq": [i], "traffic": traffic(rate)})
    return {"sample_id": sample_id, "n_nodes": n_nodes, "links": links, "paths": paths}


def write_jsonl(path: Path, records: list[dict]) -> Path:
    with open(path, "w", encoding="utf-8") as fp:
        for rec in records:
            fp.write(json.dumps(rec) + "\n")
    return path


def run_qtrn(*args: str) -> subprocess.CompletedProcess:
    """Run the delay toolkit CLI; raises on nonzero exit."""
    proc = subprocess.run(
        [sys.executable, "-m", "qtrn.cli", *args],
        capture_output=True,
        text=True,
    )
    if proc.returncode != 0:
        raise RuntimeError(
            f"qtrn {' '.join(args)} failed ({proc.returncode}):\n{proc.stdout}\n{proc.stderr}"
        )
    return proc


def make_labeled_dataset(
    root: Path,
    n_samples: int,
    seed: int,
    sim_time: float = 500.0,
    name: str = "train",
    rate_lo: float = 20.0,
    rate_hi: float = 35.0,
    fresh_lo: float = 25.0,
    fresh_hi: float = 60.0,
) -> Path:
    """Write n line samples, label them with the simulator, return the JSONL."""
    import random

    rng = random.Random(seed)
    records = [
        line_record(
            f"{name}{i:02d}",
            4,
            rng.uniform(rate_lo, rate_hi),
            [rng.uniform(fresh_lo, fresh_hi) for _ in range(3)],
        )
        for i in range(n_samples)
    ]
    raw = write_jsonl(root / f"{name}_raw.jsonl", records)
    labeled = root / f"{name}.jsonl"
    run_qtrn(
        "simulate", str(raw), "--sim-time", str(sim_time), "--seed", str(seed), "--label", str(labeled)
    )
    return labeled


def convert(jsonl: Path, out_dir: Path, variant: str, stats: Path | None = None) -> Path:
    args = ["convert", str(jsonl), str(out_dir), "--variant", variant]
    if stats is not None:
        args += ["--stats", str(stats)]
    run_qtrn(*args)
    return out_dir
