"""Heterogeneous path/link/node graph construction and bundle files.

A sample becomes one graph whose rows stack the three entity types in a fixed
order: paths first, then links, then nodes (each block in id/index order).
Fixed feature columns are likewise blocked per type; hidden state is not
materialized here, only its per-type widths, and a fresh hidden matrix is
all zeros by definition.

Six directed edge lists connect the types. A path connects to every link it
traverses (one edge per hop, so a path's in-degree from links equals its hop
count) and to every node it touches; a link connects to its two endpoint
nodes. Each relation is stored in both directions. The link-to-path edges
are additionally partitioned by hop position: subset k holds the edge from
the (k+1)-th link of every path that is long enough, which lets a recurrent
reader consume a path's links in traversal order.

Graphs are exported as one `.bundle` file per sample: an NPZ-format zip with
fixed timestamps so identical inputs produce byte-identical files (see
docs/FORMATS.md for the exact member layout).
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qtrn.net_model import NetworkSample

__all__ = [
    "FeatureRows",
    "GraphBundle",
    "HeteroGraph",
    "HiddenWidths",
    "build_graph",
    "read_bundle",
    "separate_edge_time_steps",
    "write_bundle",
]

EDGE_KINDS = (
    "path_to_link",
    "link_to_path",
    "path_to_node",
    "node_to_path",
    "link_to_node",
    "node_to_link",
)


@dataclass(frozen=True)
class HiddenWidths:
    """Hidden-state column counts per entity type; node may be 0."""

    path: int
    link: int
    node: int = 0

    def __post_init__(self) -> None:
        if self.path < 0 or self.link < 0 or self.node < 0:
            raise ValueError(f"hidden widths must be >= 0, got {self}")

    def total(self) -> int:
        return self.path + self.link + self.node


@dataclass(frozen=True)
class FeatureRows:
    """Fixed feature rows per entity type, row counts matching the sample."""

    path_rows: np.ndarray
    link_rows: np.ndarray
    node_rows: np.ndarray


def _as_edge_array(pairs: list[tuple[int, int]]) -> np.ndarray:
    if not pairs:
        return np.empty((0, 2), dtype=np.int64)
    arr = np.asarray(pairs, dtype=np.int64)
    order = np.lexsort((arr[:, 1], arr[:, 0]))
    return arr[order]


@dataclass(frozen=True)
class HeteroGraph:
    """One sample's typed graph: blocked feature matrix plus edge lists.

    Row layout: paths occupy rows [0, n_paths), links the next n_links rows,
    nodes the last n_nodes rows. x_fixed columns are blocked the same way
    (path columns, then link columns, then node columns); rows outside an
    entity's own block are zero there.
    """

    sample_id: str
    n_paths: int
    n_links: int
    n_nodes: int
    x_fixed: np.ndarray
    fixed_widths: tuple[int, int, int]
    hidden_widths: HiddenWidths
    path_to_link: np.ndarray
    link_to_path: np.ndarray
    path_to_node: np.ndarray
    node_to_path: np.ndarray
    link_to_node: np.ndarray
    node_to_link: np.ndarray
    elp_steps: tuple[np.ndarray, ...]

    @property
    def n_rows(self) -> int:
        return self.n_paths + self.n_links + self.n_nodes

    def path_row(self, i: int) -> int:
        return i

    def link_row(self, i: int) -> int:
        return self.n_paths + i

    def node_row(self, i: int) -> int:
        return self.n_paths + self.n_links + i

    def initial_hidden(self) -> np.ndarray:
        """Fresh hidden-state matrix: all zeros, one column block per type."""
        return np.zeros((self.n_rows, self.hidden_widths.total()), dtype=np.float64)

    def edges(self, kind: str) -> np.ndarray:
        if kind not in EDGE_KINDS:
            raise ValueError(f"unknown edge kind {kind!r}")
        return getattr(self, kind)


def separate_edge_time_steps(sample: NetworkSample) -> list[np.ndarray]:
    """Partition link-to-path edges by hop position.

    Entry k holds one (link_row, path_row) edge for every path whose link
    sequence is longer than k, referring to the link at 0-based position k.
    The list length is the longest path's hop count; the union of all
    entries is exactly the link-to-path edge multiset.
    """
    n_paths = len(sample.paths)
    rows = sample.link_index()
    max_len = max((len(p.link_seq) for p in sample.paths), default=0)
    steps: list[np.ndarray] = []
    for k in range(max_len):
        pairs = [
            (n_paths + rows[path.link_seq[k]], i)
            for i, path in enumerate(sample.paths)
            if len(path.link_seq) > k
        ]
        steps.append(_as_edge_array(pairs))
    return steps


def build_graph(
    sample: NetworkSample, feature_rows: FeatureRows, hidden_widths: HiddenWidths
) -> HeteroGraph:
    """Assemble the typed graph for one sample.

    feature_rows supplies the fixed feature block of each entity type (path
    rows in path id order, link rows in link id order, node rows by node
    index); shapes are checked against the sample. Edge lists are sorted
    lexicographically so construction is deterministic.
    """
    n_paths, n_links, n_nodes = len(sample.paths), len(sample.links), sample.n_nodes
    path_rows = np.atleast_2d(np.asarray(feature_rows.path_rows, dtype=np.float64))
    link_rows = np.atleast_2d(np.asarray(feature_rows.link_rows, dtype=np.float64))
    node_rows = np.atleast_2d(np.asarray(feature_rows.node_rows, dtype=np.float64))
    for name, rows, expect in (
        ("path_rows", path_rows, n_paths),
        ("link_rows", link_rows, n_links),
        ("node_rows", node_rows, n_nodes),
    ):
        if rows.shape[0] != expect:
            raise ValueError(f"{name} has {rows.shape[0]} rows, sample needs {expect}")

    widths = (path_rows.shape[1], link_rows.shape[1], node_rows.shape[1])
    total_rows = n_paths + n_links + n_nodes
    x_fixed = np.zeros((total_rows, sum(widths)), dtype=np.float64)
    x_fixed[:n_paths, : widths[0]] = path_rows
    x_fixed[n_paths : n_paths + n_links, widths[0] : widths[0] + widths[1]] = link_rows
    x_fixed[n_paths + n_links :, widths[0] + widths[1] :] = node_rows

    link_row_of = {link.id: n_paths + i for i, link in enumerate(sample.links)}
    node_row_of = lambda n: n_paths + n_links + n  # noqa: E731

    pl: list[tuple[int, int]] = []
    pn: list[tuple[int, int]] = []
    by_id = {link.id: link for link in sample.links}
    for i, path in enumerate(sample.paths):
        touched: set[int] = set()
        for lid in path.link_seq:
            pl.append((i, link_row_of[lid]))
            touched.update((by_id[lid].src, by_id[lid].dst))
        pn.extend((i, node_row_of(n)) for n in sorted(touched))

    ln: list[tuple[int, int]] = []
    for link in sample.links:
        row = link_row_of[link.id]
        ln.append((row, node_row_of(link.src)))
        ln.append((row, node_row_of(link.dst)))

    return HeteroGraph(
        sample_id=sample.sample_id,
        n_paths=n_paths,
        n_links=n_links,
        n_nodes=n_nodes,
        x_fixed=x_fixed,
        fixed_widths=widths,
        hidden_widths=hidden_widths,
        path_to_link=_as_edge_array(pl),
        link_to_path=_as_edge_array([(b, a) for a, b in pl]),
        path_to_node=_as_edge_array(pn),
        node_to_path=_as_edge_array([(b, a) for a, b in pn]),
        link_to_node=_as_edge_array(ln),
        node_to_link=_as_edge_array([(b, a) for a, b in ln]),
        elp_steps=tuple(separate_edge_time_steps(sample)),
    )


@dataclass(frozen=True)
class GraphBundle:
    """Everything a downstream model needs from one sample, self-contained.

    Carries the graph (feature matrix, edge lists, hop partition), the
    baseline feature rows in physical units (b_link columns per variant,
    b_path in time units), per-link physics for the delay head
    (queue_size_bits / capacity scaling), ids for prediction output, and
    per-path labels (NaN where unlabeled).
    """

    sample_id: str
    variant: str
    graph: HeteroGraph
    b_link: np.ndarray
    b_path: np.ndarray
    link_capacity: np.ndarray
    link_queue_size_bits: np.ndarray
    link_buffer_pkts: np.ndarray
    link_ids: np.ndarray
    path_ids: np.ndarray
    labels: np.ndarray


def _write_npz(path: Path, arrays: dict[str, np.ndarray]) -> None:
    """NPZ writer with fixed zip timestamps for byte-identical output."""
    with zipfile.ZipFile(path, "w", zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0))
            zf.writestr(info, buf.getvalue())


def write_bundle(bundle: GraphBundle, path: str | Path) -> Path:
    """Write one sample bundle; identical bundles are byte-identical files."""
    path = Path(path)
    g = bundle.graph
    meta = {
        "sample_id": bundle.sample_id,
        "variant": bundle.variant,
        "format_version": 1,
    }
    elp_lens = [len(step) for step in g.elp_steps]
    arrays: dict[str, np.ndarray] = {
        "meta": np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8),
        "counts": np.array([g.n_paths, g.n_links, g.n_nodes], dtype=np.int64),
        "x_fixed": g.x_fixed.astype(np.float64),
        "fixed_widths": np.array(g.fixed_widths, dtype=np.int64),
        "hidden_widths": np.array(
            [g.hidden_widths.path, g.hidden_widths.link, g.hidden_widths.node], dtype=np.int64
        ),
        "elp_edges": (
            np.concatenate(g.elp_steps) if g.elp_steps else np.empty((0, 2), dtype=np.int64)
        ).astype(np.int64),
        "elp_offsets": np.cumsum([0] + elp_lens).astype(np.int64),
        "b_link": bundle.b_link.astype(np.float64),
        "b_path": bundle.b_path.astype(np.float64),
        "link_capacity": bundle.link_capacity.astype(np.float64),
        "link_queue_size_bits": bundle.link_queue_size_bits.astype(np.float64),
        "link_buffer_pkts": bundle.link_buffer_pkts.astype(np.int64),
        "link_ids": bundle.link_ids.astype(np.int64),
        "path_ids": bundle.path_ids.astype(np.int64),
        "labels": bundle.labels.astype(np.float64),
    }
    for kind in EDGE_KINDS:
        arrays[f"edges_{kind}"] = g.edges(kind)
    _write_npz(path, arrays)
    return path


def read_bundle(path: str | Path) -> GraphBundle:
    """Load one sample bundle written by write_bundle."""
    with np.load(path) as data:
        meta = json.loads(bytes(data["meta"]).decode("utf-8"))
        counts = data["counts"]
        offsets = data["elp_offsets"]
        elp_edges = data["elp_edges"]
        steps = tuple(
            elp_edges[offsets[i] : offsets[i + 1]] for i in range(len(offsets) - 1)
        )
        hw = data["hidden_widths"]
        graph = HeteroGraph(
            sample_id=meta["sample_id"],
            n_paths=int(counts[0]),
            n_links=int(counts[1]),
            n_nodes=int(counts[2]),
            x_fixed=data["x_fixed"],
            fixed_widths=tuple(int(w) for w in data["fixed_widths"]),
            hidden_widths=HiddenWidths(path=int(hw[0]), link=int(hw[1]), node=int(hw[2])),
            path_to_link=data["edges_path_to_link"],
            link_to_path=data["edges_link_to_path"],
            path_to_node=data["edges_path_to_node"],
            node_to_path=data["edges_node_to_path"],
            link_to_node=data["edges_link_to_node"],
            node_to_link=data["edges_node_to_link"],
            elp_steps=steps,
        )
        return GraphBundle(
            sample_id=meta["sample_id"],
            variant=meta["variant"],
            graph=graph,
            b_link=data["b_link"],
            b_path=data["b_path"],
            link_capacity=data["link_capacity"],
            link_queue_size_bits=data["link_queue_size_bits"],
            link_buffer_pkts=data["link_buffer_pkts"],
            link_ids=data["link_ids"],
            path_ids=data["path_ids"],
            labels=data["labels"],
        )
