"""Readers for converted dataset directories.

A converted dataset is a directory holding manifest.json, stats.json and
samples/<sample_id>.bundle files as documented in docs/FORMATS.md at the
repository root. Bundles are plain NPZ archives, so everything here is
numpy-level file reading; nothing in this package depends on the code that
wrote them.
"""

from __future__ import annotations

import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

EDGE_KINDS = (
    "path_to_link",
    "link_to_path",
    "path_to_node",
    "node_to_path",
    "link_to_node",
    "node_to_link",
)


class BundleError(ValueError):
    """A dataset directory or bundle file is malformed."""


@dataclass(frozen=True)
class Bundle:
    """One sample's graph, baseline features, physics and labels.

    Row convention for x_fixed and all edge indices: paths first (path id
    order), then links (link id order), then nodes (node index order).
    ``elp_steps[k]`` holds the link_to_path edges whose link is hop k of the
    target path. ``labels`` is per-path delay with NaN marking unlabeled
    paths.
    """

    sample_id: str
    variant: str
    n_paths: int
    n_links: int
    n_nodes: int
    x_fixed: np.ndarray
    fixed_widths: tuple[int, int, int]
    hidden_widths: tuple[int, int, int]
    edges: dict[str, np.ndarray]
    elp_steps: tuple[np.ndarray, ...]
    b_link: np.ndarray
    b_path: np.ndarray
    link_capacity: np.ndarray
    link_queue_size_bits: np.ndarray
    link_buffer_pkts: np.ndarray
    link_ids: np.ndarray
    path_ids: np.ndarray
    labels: np.ndarray

    @property
    def n_rows(self) -> int:
        return self.n_paths + self.n_links + self.n_nodes

    @property
    def labeled(self) -> np.ndarray:
        """Boolean mask over paths with a usable label."""
        return np.isfinite(self.labels)


def load_bundle(path: str | Path) -> Bundle:
    """Read one .bundle file."""
    path = Path(path)
    try:
        with np.load(path) as data:
            meta = json.loads(bytes(data["meta"]).decode("utf-8"))
            counts = data["counts"]
            offsets = data["elp_offsets"]
            elp_edges = data["elp_edges"]
            steps = tuple(
                np.asarray(elp_edges[offsets[i] : offsets[i + 1]], dtype=np.int64)
                for i in range(len(offsets) - 1)
            )
            bundle = Bundle(
                sample_id=str(meta["sample_id"]),
                variant=str(meta["variant"]),
                n_paths=int(counts[0]),
                n_links=int(counts[1]),
                n_nodes=int(counts[2]),
                x_fixed=np.asarray(data["x_fixed"], dtype=np.float64),
                fixed_widths=tuple(int(w) for w in data["fixed_widths"]),
                hidden_widths=tuple(int(w) for w in data["hidden_widths"]),
                edges={k: np.asarray(data[f"edges_{k}"], dtype=np.int64) for k in EDGE_KINDS},
                elp_steps=steps,
                b_link=np.asarray(data["b_link"], dtype=np.float64),
                b_path=np.asarray(data["b_path"], dtype=np.float64),
                link_capacity=np.asarray(data["link_capacity"], dtype=np.float64),
                link_queue_size_bits=np.asarray(data["link_queue_size_bits"], dtype=np.float64),
                link_buffer_pkts=np.asarray(data["link_buffer_pkts"], dtype=np.int64),
                link_ids=np.asarray(data["link_ids"], dtype=np.int64),
                path_ids=np.asarray(data["path_ids"], dtype=np.int64),
                labels=np.asarray(data["labels"], dtype=np.float64),
            )
    except KeyError as exc:
        raise BundleError(f"{path}: missing bundle member {exc}") from exc
    except (OSError, zipfile.BadZipFile, json.JSONDecodeError) as exc:
        raise BundleError(f"{path}: not a readable bundle ({exc})") from exc
    _check_bundle(bundle, path)
    return bundle


def _check_bundle(b: Bundle, path: Path) -> None:
    if b.x_fixed.shape != (b.n_rows, sum(b.fixed_widths)):
        raise BundleError(
            f"{path}: x_fixed shape {b.x_fixed.shape} does not match counts {b.n_paths}/{b.n_links}/{b.n_nodes}"
        )
    if b.b_path.shape != (b.n_paths,) or b.labels.shape != (b.n_paths,):
        raise BundleError(f"{path}: per-path arrays do not match n_paths={b.n_paths}")
    if b.b_link.shape[0] != b.n_links or b.link_capacity.shape != (b.n_links,):
        raise BundleError(f"{path}: per-link arrays do not match n_links={b.n_links}")
    for kind, arr in b.edges.items():
        if arr.size and (arr.min() < 0 or arr.max() >= b.n_rows):
            raise BundleError(f"{path}: edge indices of {kind} outside [0, {b.n_rows})")


@dataclass(frozen=True)
class Dataset:
    """A converted dataset directory: manifest plus its bundles in manifest order."""

    directory: Path
    variant: str
    manifest: dict
    bundles: tuple[Bundle, ...]

    def __len__(self) -> int:
        return len(self.bundles)


def load_dataset(directory: str | Path, limit: int | None = None) -> Dataset:
    """Load a converted dataset directory.

    Bundles come back in manifest sample order (sorted ids, which is how the
    converter records them). ``limit`` keeps only the first n samples, which
    is how validation subsampling stays fixed across epochs.
    """
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise BundleError(f"{directory}: no manifest.json, not a converted dataset")
    with open(manifest_path, encoding="utf-8") as fp:
        manifest = json.load(fp)
    variant = str(manifest.get("variant", ""))
    ids = list(manifest.get("samples", []))
    if limit is not None:
        ids = ids[:limit]
    bundles = []
    for sid in ids:
        bundle = load_bundle(directory / "samples" / f"{sid}.bundle")
        if bundle.variant != variant:
            raise BundleError(
                f"{directory}: sample {sid} is variant {bundle.variant!r}, manifest says {variant!r}"
            )
        bundles.append(bundle)
    return Dataset(directory=directory, variant=variant, manifest=manifest, bundles=tuple(bundles))
