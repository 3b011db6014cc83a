"""Training loop for the fine-tuning model.

Adam at a fixed learning rate, MAPE loss over the labeled paths of each
batch, one checkpoint per epoch plus a running best. An epoch visits a
random fraction of the training set; validation runs on a fixed leading
slice of each validation directory so the score series is comparable
across epochs and runs. Model selection averages the second and third
validation sets when three or more are given, which is where the target
distribution lives; with fewer sets it averages whatever is there.
"""

from __future__ import annotations

import json
import logging
import random
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import torch

from .bundles import Dataset, load_dataset
from .model import DelayFineTuner, GraphTensors, ModelSpec, checkpoint_payload, prepare

log = logging.getLogger("qtrn_gnn.train")


class TrainError(RuntimeError):
    """Training aborted; the message carries the diagnostics."""


@dataclass(frozen=True)
class TrainConfig:
    """Optimisation knobs. Defaults follow the reference setup."""

    epochs: int = 50
    batch_size: int = 16
    learning_rate: float = 1e-3
    epoch_fraction: float = 0.1
    val_subsample: int = 50
    seed: int = 0
    patience: Optional[int] = None

    def validate(self) -> None:
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.epoch_fraction <= 1:
            raise ValueError("epoch_fraction must be in (0, 1]")
        if self.val_subsample < 1:
            raise ValueError("val_subsample must be >= 1")
        if self.patience is not None and self.patience < 1:
            raise ValueError("patience must be >= 1 when set")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_mape: float
    val_mape: tuple[float, ...]
    score: float
    checkpoint: str


@dataclass(frozen=True)
class TrainResult:
    out_dir: Path
    best_epoch: int
    best_score: float
    best_checkpoint: Path
    history: tuple[EpochRecord, ...]
    stopped_early: bool


def mape(pred: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    """Mean absolute percentage error; truth must be positive."""
    return 100.0 * ((pred - truth).abs() / truth).mean()


def _labeled_graphs(dataset: Dataset, spec: ModelSpec, what: str) -> list[GraphTensors]:
    graphs = []
    for bundle in dataset.bundles:
        if not bundle.labeled.any():
            continue
        finite = bundle.labels[bundle.labeled]
        if (finite <= 0).any():
            raise ValueError(
                f"{what} sample {bundle.sample_id} has non-positive labels; cannot compute MAPE"
            )
        graphs.append(prepare(bundle, spec))
    if not graphs:
        raise ValueError(f"{what} set {dataset.directory} has no labeled samples")
    return graphs


def _batch_loss(model: DelayFineTuner, graphs: Sequence[GraphTensors]) -> tuple[torch.Tensor, int]:
    preds, truths = [], []
    for g in graphs:
        mask = torch.isfinite(g.labels)
        pred = model(g)
        preds.append(pred[mask])
        truths.append(g.labels[mask])
    pred = torch.cat(preds)
    truth = torch.cat(truths)
    return mape(pred, truth), int(truth.numel())


def _validation_score(val_mapes: Sequence[float], train_mape: float) -> float:
    if len(val_mapes) >= 3:
        return (val_mapes[1] + val_mapes[2]) / 2.0
    if val_mapes:
        return sum(val_mapes) / len(val_mapes)
    return train_mape


def train(
    train_dir: str | Path,
    val_dirs: Sequence[str | Path] = (),
    out_dir: str | Path = "run",
    config: TrainConfig | None = None,
    spec: ModelSpec | None = None,
) -> TrainResult:
    """Train on a converted dataset directory and write checkpoints.

    out_dir receives epoch_NNN.ckpt per epoch, best.ckpt (a byte copy of
    the best epoch's file) and history.json. Runs are deterministic for a
    fixed config and input data.
    """
    config = config or TrainConfig()
    config.validate()
    train_set = load_dataset(train_dir)
    if spec is None:
        spec = ModelSpec.for_variant(train_set.variant)
    elif spec.variant != train_set.variant:
        raise ValueError(
            f"model spec is variant {spec.variant!r}, training data is {train_set.variant!r}"
        )

    torch.manual_seed(config.seed)
    train_graphs = _labeled_graphs(train_set, spec, "training")
    val_graph_sets = [
        _labeled_graphs(load_dataset(d, limit=config.val_subsample), spec, "validation")
        for d in val_dirs
    ]

    model = DelayFineTuner(spec, train_graphs[0].fixed_widths, train_graphs[0].b_link.shape[1])
    optimizer = torch.optim.Adam(model.parameters(), lr=config.learning_rate)

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = random.Random(config.seed)
    n_visit = max(1, round(config.epoch_fraction * len(train_graphs)))

    history: list[EpochRecord] = []
    best_epoch, best_score = 0, float("inf")
    best_path = out_dir / "best.ckpt"
    stopped_early = False

    for epoch in range(1, config.epochs + 1):
        model.train()
        visit = rng.sample(range(len(train_graphs)), n_visit)
        loss_sum, path_count = 0.0, 0
        for b0 in range(0, len(visit), config.batch_size):
            batch = [train_graphs[i] for i in visit[b0 : b0 + config.batch_size]]
            optimizer.zero_grad()
            loss, n_batch = _batch_loss(model, batch)
            if not torch.isfinite(loss):
                ids = ", ".join(g.sample_id for g in batch)
                raise TrainError(
                    f"non-finite loss {loss.item()!r} at epoch {epoch}, "
                    f"batch {b0 // config.batch_size + 1} (samples: {ids}); aborting"
                )
            loss.backward()
            optimizer.step()
            loss_sum += loss.item() * n_batch
            path_count += n_batch
        train_mape = loss_sum / path_count

        model.eval()
        val_mapes = []
        with torch.no_grad():
            for graphs in val_graph_sets:
                loss, _ = _batch_loss(model, graphs)
                val_mapes.append(loss.item())
        score = _validation_score(val_mapes, train_mape)

        ckpt_name = f"epoch_{epoch:03d}.ckpt"
        ckpt_path = out_dir / ckpt_name
        torch.save(
            checkpoint_payload(
                model,
                epoch=epoch,
                train_mape=train_mape,
                val_mape=list(val_mapes),
                score=score,
                train_config=config.to_dict(),
            ),
            ckpt_path,
        )
        if score < best_score:
            best_score, best_epoch = score, epoch
            shutil.copyfile(ckpt_path, best_path)
        history.append(
            EpochRecord(
                epoch=epoch,
                train_mape=train_mape,
                val_mape=tuple(val_mapes),
                score=score,
                checkpoint=ckpt_name,
            )
        )
        log.info(
            "epoch %d/%d train MAPE %.3f%% val %s score %.3f%% (best %.3f%% @ %d)",
            epoch,
            config.epochs,
            train_mape,
            "/".join(f"{v:.3f}" for v in val_mapes) or "-",
            score,
            best_score,
            best_epoch,
        )
        if config.patience is not None and epoch - best_epoch >= config.patience:
            stopped_early = True
            log.info("no improvement for %d epochs, stopping early", config.patience)
            break

    _write_history(out_dir / "history.json", train_set.variant, config, history, best_epoch, best_score, stopped_early)
    return TrainResult(
        out_dir=out_dir,
        best_epoch=best_epoch,
        best_score=best_score,
        best_checkpoint=best_path,
        history=tuple(history),
        stopped_early=stopped_early,
    )


def _write_history(
    path: Path,
    variant: str,
    config: TrainConfig,
    history: Sequence[EpochRecord],
    best_epoch: int,
    best_score: float,
    stopped_early: bool,
) -> None:
    doc = {
        "variant": variant,
        "train_config": config.to_dict(),
        "best_epoch": best_epoch,
        "best_score": best_score,
        "stopped_early": stopped_early,
        "epochs": [
            {
                "epoch": rec.epoch,
                "train_mape": rec.train_mape,
                "val_mape": list(rec.val_mape),
                "score": rec.score,
                "checkpoint": rec.checkpoint,
            }
            for rec in history
        ],
    }
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(doc, fp, indent=2, sort_keys=True)
        fp.write("\n")
