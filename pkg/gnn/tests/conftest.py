"""Session fixtures: converted datasets produced through the toolkit CLI."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import pytest

import gnn_testutil as tu


@dataclass(frozen=True)
class DatasetPaths:
    """Everything the tests need on disk, built once per session."""

    train_jsonl: Path
    train_m1: Path
    train_m2: Path
    val_m2: tuple[Path, ...]
    toy_m2: Path


@pytest.fixture(scope="session")
def data(tmp_path_factory) -> DatasetPaths:
    root = tmp_path_factory.mktemp("gnn_data")

    train_jsonl = tu.make_labeled_dataset(root, 10, seed=11, name="train")
    train_m1 = tu.convert(train_jsonl, root / "train_m1", "m1")
    train_m2 = tu.convert(train_jsonl, root / "train_m2", "m2")

    # three small validation sets sharing the training standardization,
    # so model selection has a second and third subset to prioritize
    val_dirs = []
    for k in range(3):
        val_jsonl = tu.make_labeled_dataset(root, 2, seed=100 + k, name=f"val{k}")
        val_dirs.append(
            tu.convert(val_jsonl, root / f"val{k}_m2", "m2", stats=train_m2 / "stats.json")
        )

    # two-path toy sample for the gradient check
    toy = tu.line_record("toy", 3, 28.0, [45.0])
    toy["paths"] = toy["paths"][:2]  # one 2-hop path, one 1-hop path
    raw = tu.write_jsonl(root / "toy_raw.jsonl", [toy])
    labeled = root / "toy.jsonl"
    tu.run_qtrn("simulate", str(raw), "--sim-time", "400", "--seed", "3", "--label", str(labeled))
    toy_m2 = tu.convert(labeled, root / "toy_m2", "m2", stats=train_m2 / "stats.json")

    return DatasetPaths(
        train_jsonl=train_jsonl,
        train_m1=train_m1,
        train_m2=train_m2,
        val_m2=tuple(val_dirs),
        toy_m2=toy_m2,
    )
