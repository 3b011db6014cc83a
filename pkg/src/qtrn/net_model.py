"""Network sample data model and JSON-Lines serialization.

A sample is one routed network snapshot: a set of directed links with finite
packet buffers, and a set of source-destination paths, each given as an
ordered sequence of link ids plus a traffic descriptor. Samples are stored
one-per-line as JSON (see docs/FORMATS.md for the schema). Serialization is
canonical: semantically equal samples produce byte-identical lines, so
converted datasets can be compared with plain file diffs.

Link and path tuples are kept sorted by id; row indices used by the rest of
the package (feature matrices, graph rows) follow that order.
"""

from __future__ import annotations

import io
import json
import os
from collections.abc import Iterable, Iterator
from dataclasses import dataclass, field

__all__ = [
    "Link",
    "NetworkSample",
    "PathFlow",
    "SampleError",
    "SampleParseError",
    "SampleValidationError",
    "TrafficDescriptor",
    "dump_sample",
    "dumps_sample",
    "iter_samples",
    "load_sample",
    "parse_sample",
    "read_samples",
    "write_samples",
]

TRAFFIC_FIELDS = ("avg_pkts_lambda", "eq_lambda", "avg_bw", "pkts_gen", "total_pkts_gen")


class SampleError(Exception):
    """Base class for sample I/O and validation failures."""


class SampleParseError(SampleError):
    """Raised when a JSON-Lines record cannot be parsed into a sample."""


class SampleValidationError(SampleError):
    """Raised when a structurally valid sample violates a model invariant.

    The message always starts with the name of the violated invariant.
    """


@dataclass(frozen=True)
class TrafficDescriptor:
    """Traffic attributes of one path, all non-negative.

    avg_pkts_lambda and pkts_gen are packet rates per time unit (pkts_gen is
    the demand the queueing engine and simulator inject), eq_lambda is an
    equivalent-rate summary, avg_bw is in bits per time unit and
    total_pkts_gen is a cumulative packet count.
    """

    avg_pkts_lambda: float
    eq_lambda: float
    avg_bw: float
    pkts_gen: float
    total_pkts_gen: float

    def as_row(self) -> tuple[float, float, float, float, float]:
        return (
            self.avg_pkts_lambda,
            self.eq_lambda,
            self.avg_bw,
            self.pkts_gen,
            self.total_pkts_gen,
        )


@dataclass(frozen=True)
class Link:
    """One directed link: endpoints are node indices, capacity in bits/time.

    buffer_pkts is the queue capacity in packets (service position included);
    queue_size_bits is the same buffer expressed in bits, so
    queue_size_bits / buffer_pkts is the mean packet size the link is
    provisioned for.
    """

    id: int
    src: int
    dst: int
    capacity: float
    buffer_pkts: int
    queue_size_bits: float


@dataclass(frozen=True)
class PathFlow:
    """One routed path: ordered link ids plus traffic, optionally labeled.

    label_delay is a measured mean per-packet delay in time units (from the
    simulator or an external dataset); None means unlabeled.
    """

    id: int
    link_seq: tuple[int, ...]
    traffic: TrafficDescriptor
    label_delay: float | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "link_seq", tuple(self.link_seq))


@dataclass(frozen=True)
class NetworkSample:
    """One network snapshot; links and paths are normalized to id order."""

    sample_id: str
    n_nodes: int
    links: tuple[Link, ...] = field(default_factory=tuple)
    paths: tuple[PathFlow, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "links", tuple(sorted(self.links, key=lambda l: l.id)))
        object.__setattr__(self, "paths", tuple(sorted(self.paths, key=lambda p: p.id)))

    def link_index(self) -> dict[int, int]:
        """Map link id -> row index (links are stored in sorted-id order)."""
        return {link.id: i for i, link in enumerate(self.links)}

    def validate(self) -> None:
        """Check every model invariant; raise SampleValidationError on the first failure."""
        validate_sample(self)


def validate_sample(sample: NetworkSample) -> None:
    """Raise SampleValidationError naming the violated invariant, if any."""

    def fail(invariant: str, detail: str) -> None:
        raise SampleValidationError(f"{invariant}: {detail} (sample {sample.sample_id!r})")

    if sample.n_nodes < 1:
        fail("n_nodes >= 1", f"got {sample.n_nodes}")

    seen_links: set[int] = set()
    for link in sample.links:
        if link.id in seen_links:
            fail("unique link ids", f"link id {link.id} repeated")
        seen_links.add(link.id)
        if not link.capacity > 0:
            fail("capacity > 0", f"link {link.id} has capacity {link.capacity}")
        if link.buffer_pkts < 1:
            fail("buffer_pkts >= 1", f"link {link.id} has buffer_pkts {link.buffer_pkts}")
        if not link.queue_size_bits > 0:
            fail("queue_size_bits > 0", f"link {link.id} has {link.queue_size_bits}")
        if link.src == link.dst:
            fail("src != dst", f"link {link.id} loops on node {link.src}")
        for end_name, end in (("src", link.src), ("dst", link.dst)):
            if not 0 <= end < sample.n_nodes:
                fail(
                    "node index in range",
                    f"link {link.id} {end_name}={end} outside [0, {sample.n_nodes})",
                )

    by_id = {link.id: link for link in sample.links}
    seen_paths: set[int] = set()
    for path in sample.paths:
        if path.id in seen_paths:
            fail("unique path ids", f"path id {path.id} repeated")
        seen_paths.add(path.id)
        if not path.link_seq:
            fail("link_seq non-empty", f"path {path.id} has no links")
        for lid in path.link_seq:
            if lid not in by_id:
                fail("link_seq references existing links", f"path {path.id} uses unknown link {lid}")
        for a, b in zip(path.link_seq, path.link_seq[1:]):
            la, lb = by_id[a], by_id[b]
            if not {la.src, la.dst} & {lb.src, lb.dst}:
                fail(
                    "consecutive links share an endpoint",
                    f"path {path.id} jumps from link {a} to link {b}",
                )
        for name, value in zip(TRAFFIC_FIELDS, path.traffic.as_row()):
            if value < 0:
                fail("traffic fields >= 0", f"path {path.id} has {name}={value}")
        if path.label_delay is not None and not path.label_delay > 0:
            fail("label_delay > 0", f"path {path.id} has label_delay {path.label_delay}")


def _require(record: dict, key: str, where: str, line_no: int | None):
    if key not in record:
        raise SampleParseError(f"{_loc(line_no)}{where} missing field {key!r}")
    return record[key]


def _loc(line_no: int | None) -> str:
    return f"line {line_no}: " if line_no is not None else ""


def _as_number(value, where: str, key: str, line_no: int | None) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise SampleParseError(f"{_loc(line_no)}{where}.{key} must be a number, got {value!r}")
    return float(value)


def _as_int(value, where: str, key: str, line_no: int | None) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise SampleParseError(f"{_loc(line_no)}{where}.{key} must be an integer, got {value!r}")
    return value


def parse_sample(record: dict | str, line_no: int | None = None) -> NetworkSample:
    """Build a NetworkSample from one decoded JSON object (or raw line).

    Raises SampleParseError with line/field context on malformed input. The
    result is not validated; call validate_sample for invariant checks.
    """
    if isinstance(record, str):
        try:
            record = json.loads(record)
        except json.JSONDecodeError as exc:
            raise SampleParseError(f"{_loc(line_no)}invalid JSON: {exc}") from exc
    if not isinstance(record, dict):
        raise SampleParseError(f"{_loc(line_no)}record is not a JSON object")

    sample_id = _require(record, "sample_id", "sample", line_no)
    if not isinstance(sample_id, str):
        raise SampleParseError(f"{_loc(line_no)}sample.sample_id must be a string")
    n_nodes = _as_int(_require(record, "n_nodes", "sample", line_no), "sample", "n_nodes", line_no)

    links = []
    raw_links = _require(record, "links", "sample", line_no)
    if not isinstance(raw_links, list):
        raise SampleParseError(f"{_loc(line_no)}sample.links must be a list")
    for i, raw in enumerate(raw_links):
        where = f"links[{i}]"
        if not isinstance(raw, dict):
            raise SampleParseError(f"{_loc(line_no)}{where} is not a JSON object")
        links.append(
            Link(
                id=_as_int(_require(raw, "id", where, line_no), where, "id", line_no),
                src=_as_int(_require(raw, "src", where, line_no), where, "src", line_no),
                dst=_as_int(_require(raw, "dst", where, line_no), where, "dst", line_no),
                capacity=_as_number(_require(raw, "capacity", where, line_no), where, "capacity", line_no),
                buffer_pkts=_as_int(
                    _require(raw, "buffer_pkts", where, line_no), where, "buffer_pkts", line_no
                ),
                queue_size_bits=_as_number(
                    _require(raw, "queue_size_bits", where, line_no), where, "queue_size_bits", line_no
                ),
            )
        )

    paths = []
    raw_paths = _require(record, "paths", "sample", line_no)
    if not isinstance(raw_paths, list):
        raise SampleParseError(f"{_loc(line_no)}sample.paths must be a list")
    for i, raw in enumerate(raw_paths):
        where = f"paths[{i}]"
        if not isinstance(raw, dict):
            raise SampleParseError(f"{_loc(line_no)}{where} is not a JSON object")
        seq = _require(raw, "link_seq", where, line_no)
        if not isinstance(seq, list) or not all(
            isinstance(x, int) and not isinstance(x, bool) for x in seq
        ):
            raise SampleParseError(f"{_loc(line_no)}{where}.link_seq must be a list of integers")
        raw_traffic = _require(raw, "traffic", where, line_no)
        if not isinstance(raw_traffic, dict):
            raise SampleParseError(f"{_loc(line_no)}{where}.traffic must be a JSON object")
        traffic = TrafficDescriptor(
            **{
                name: _as_number(
                    _require(raw_traffic, name, f"{where}.traffic", line_no),
                    f"{where}.traffic",
                    name,
                    line_no,
                )
                for name in TRAFFIC_FIELDS
            }
        )
        label = raw.get("label_delay")
        if label is not None:
            label = _as_number(label, where, "label_delay", line_no)
        paths.append(
            PathFlow(
                id=_as_int(_require(raw, "id", where, line_no), where, "id", line_no),
                link_seq=tuple(seq),
                traffic=traffic,
                label_delay=label,
            )
        )

    return NetworkSample(sample_id=sample_id, n_nodes=n_nodes, links=tuple(links), paths=tuple(paths))


def dumps_sample(sample: NetworkSample) -> str:
    """Serialize one sample to its canonical JSON line (no trailing newline).

    Field order is fixed, floats use shortest round-trip repr, and links and
    paths appear in id order, so equal samples serialize byte-identically.
    """
    record = {
        "sample_id": sample.sample_id,
        "n_nodes": sample.n_nodes,
        "links": [
            {
                "id": link.id,
                "src": link.src,
                "dst": link.dst,
                "capacity": float(link.capacity),
                "buffer_pkts": link.buffer_pkts,
                "queue_size_bits": float(link.queue_size_bits),
            }
            for link in sample.links
        ],
        "paths": [],
    }
    for path in sample.paths:
        raw: dict = {
            "id": path.id,
            "link_seq": list(path.link_seq),
            "traffic": {name: float(v) for name, v in zip(TRAFFIC_FIELDS, path.traffic.as_row())},
        }
        if path.label_delay is not None:
            raw["label_delay"] = float(path.label_delay)
        record["paths"].append(raw)
    return json.dumps(record, separators=(",", ":"))


def dump_sample(sample: NetworkSample, fp: io.TextIOBase) -> None:
    """Write one canonical sample line to a text stream."""
    fp.write(dumps_sample(sample))
    fp.write("\n")


def load_sample(fp: io.TextIOBase, validate: bool = True) -> NetworkSample:
    """Read one sample line from a text stream.

    Raises SampleParseError at end of stream or on malformed content.
    """
    line = fp.readline()
    if not line:
        raise SampleParseError("unexpected end of stream while reading a sample")
    sample = parse_sample(line)
    if validate:
        validate_sample(sample)
    return sample


def iter_samples(source: str | os.PathLike | io.TextIOBase, validate: bool = True) -> Iterator[NetworkSample]:
    """Lazily yield samples from a JSON-Lines file path or open text stream.

    Holds one line in memory at a time, so arbitrarily large files stream.
    Blank lines are skipped; parse errors carry the 1-based line number.
    """
    if isinstance(source, (str, os.PathLike)):
        with open(source, "r", encoding="utf-8") as fp:
            yield from iter_samples(fp, validate=validate)
        return
    for line_no, line in enumerate(source, start=1):
        if not line.strip():
            continue
        sample = parse_sample(line, line_no=line_no)
        if validate:
            validate_sample(sample)
        yield sample


def read_samples(path: str | os.PathLike, validate: bool = True) -> list[NetworkSample]:
    """Read a whole JSON-Lines file into a list (convenience for small files)."""
    return list(iter_samples(path, validate=validate))


def write_samples(samples: Iterable[NetworkSample], path: str | os.PathLike) -> int:
    """Write samples to a JSON-Lines file; returns the number written."""
    count = 0
    with open(path, "w", encoding="utf-8") as fp:
        for sample in samples:
            dump_sample(sample, fp)
            count += 1
    return count
