"""Discrete-event network simulator used as desk-scale ground truth.

Packets are generated per path as independent Poisson streams at the path's
demand rate; each packet draws its size once at generation (exponential with
mean queue_size_bits / buffer_pkts of the path's first link by default) and
keeps it across hops, so per-hop service times are size / capacity. Every
link is a FIFO queue holding at most buffer_pkts packets including the one
in service; a packet arriving at a full queue is dropped and leaves the
network. There is no propagation delay: a packet departing one link arrives
at the next instantly.

With a single queue this is exactly the M/M/1/B model of the analytic
baseline, which makes the simulator a sharp oracle there; on multi-hop paths
the retained packet size introduces the correlations the per-link
independence approximation ignores.

Accounting uses a measurement window: packets generated before
warmup_frac * sim_time are simulated but not measured, generation stops at
sim_time, and the network then drains so every measured packet resolves to
delivered or dropped (their sum equals the measured generation count
exactly). Occupancy is the time average over the window. Event ties are
broken by a monotone sequence number, so a fixed seed reproduces results
bit for bit.
"""

from __future__ import annotations

import json
import logging
from collections import deque
from dataclasses import dataclass, replace
from heapq import heapify, heappop, heappush
from pathlib import Path

import numpy as np

from qtrn.net_model import NetworkSample

__all__ = ["SimConfig", "SimResult", "label_sample", "result_to_json", "simulate", "write_results"]

logger = logging.getLogger(__name__)

_ARRIVAL, _DEPART = 0, 1


@dataclass(frozen=True)
class SimConfig:
    """Simulation horizon, warmup fraction, seed and packet-size mode."""

    sim_time: float = 10000.0
    warmup_frac: float = 0.05
    seed: int = 0
    packet_size_mode: str = "exponential"

    def __post_init__(self) -> None:
        if not self.sim_time > 0:
            raise ValueError(f"sim_time must be > 0, got {self.sim_time}")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValueError(f"warmup_frac must be in [0, 1), got {self.warmup_frac}")
        if self.packet_size_mode not in ("exponential", "deterministic"):
            raise ValueError(
                f"packet_size_mode must be 'exponential' or 'deterministic', got {self.packet_size_mode!r}"
            )


@dataclass(frozen=True)
class SimResult:
    """Measured outcome of one run.

    Counts cover packets generated inside the measurement window only;
    delivered + dropped == generated always holds. Per-path mean delays are
    NaN when a path delivered nothing. Per-link blocking is the dropped
    fraction of measured arrivals at that link (0 when nothing arrived);
    mean sojourn is per served packet and NaN when nothing was served.
    """

    sample_id: str
    seed: int
    sim_time: float
    warmup_frac: float
    generated: int
    delivered: int
    dropped: int
    events: int
    path_ids: tuple[int, ...]
    path_mean_delay: np.ndarray
    path_delivered: np.ndarray
    path_dropped: np.ndarray
    link_ids: tuple[int, ...]
    link_mean_occupancy: np.ndarray
    link_blocking: np.ndarray
    link_mean_sojourn: np.ndarray
    link_arrivals: np.ndarray
    link_drops: np.ndarray
    link_served: np.ndarray


def simulate(sample: NetworkSample, cfg: SimConfig | None = None) -> SimResult:
    """Run one sample through the event simulator and measure it."""
    cfg = cfg or SimConfig()
    n_paths, n_links = len(sample.paths), len(sample.links)
    rows = sample.link_index()
    caps = [link.capacity for link in sample.links]
    bufs = [link.buffer_pkts for link in sample.links]
    path_links: list[list[int]] = [[rows[lid] for lid in p.link_seq] for p in sample.paths]

    w0 = cfg.warmup_frac * cfg.sim_time
    w1 = cfg.sim_time
    rng = np.random.default_rng(cfg.seed)

    # Pre-generate every packet: Poisson arrivals until the horizon, then
    # sizes, path by path in id order so the draw sequence is fixed.
    pkt_path: list[int] = []
    pkt_gen: list[float] = []
    pkt_size: list[float] = []
    events: list[tuple[float, int, int, int, int]] = []
    seq = 0
    for i, path in enumerate(sample.paths):
        rate = path.traffic.pkts_gen
        if rate <= 0:
            continue
        first = sample.links[path_links[i][0]]
        mean_bits = first.queue_size_bits / first.buffer_pkts
        scale = 1.0 / rate
        times: list[float] = []
        t = 0.0
        done = False
        while not done:
            for dt in rng.exponential(scale, 2048):
                t += dt
                if t >= cfg.sim_time:
                    done = True
                    break
                times.append(t)
        if cfg.packet_size_mode == "exponential":
            sizes = rng.exponential(mean_bits, len(times))
        else:
            sizes = np.full(len(times), mean_bits)
        for t, size in zip(times, sizes):
            idx = len(pkt_path)
            pkt_path.append(i)
            pkt_gen.append(t)
            pkt_size.append(float(size))
            events.append((t, seq, _ARRIVAL, idx, 0))
            seq += 1
    heapify(events)

    queues: list[deque[int]] = [deque() for _ in range(n_links)]
    occ_int = [0.0] * n_links
    occ_last = [0.0] * n_links
    arrivals = [0] * n_links
    drops = [0] * n_links
    served = [0] * n_links
    sojourn_sum = [0.0] * n_links
    pkt_hop = [0] * len(pkt_path)
    pkt_link_t = [0.0] * len(pkt_path)
    delay_sum = [0.0] * n_paths
    delivered_per_path = [0] * n_paths
    dropped_per_path = [0] * n_paths
    n_events = 0

    while events:
        t, _, kind, a, b = heappop(events)
        n_events += 1
        if kind == _ARRIVAL:
            pkt = a
            link = path_links[pkt_path[pkt]][b]
            q = queues[link]
            last = occ_last[link]
            if t > w0 and last < w1:
                lo = last if last > w0 else w0
                hi = t if t < w1 else w1
                if hi > lo:
                    occ_int[link] += len(q) * (hi - lo)
            occ_last[link] = t
            measured = pkt_gen[pkt] >= w0
            if measured:
                arrivals[link] += 1
            if len(q) >= bufs[link]:
                if measured:
                    drops[link] += 1
                    dropped_per_path[pkt_path[pkt]] += 1
            else:
                q.append(pkt)
                pkt_hop[pkt] = b
                pkt_link_t[pkt] = t
                if len(q) == 1:
                    heappush(events, (t + pkt_size[pkt] / caps[link], seq, _DEPART, link, 0))
                    seq += 1
        else:
            link = a
            q = queues[link]
            last = occ_last[link]
            if t > w0 and last < w1:
                lo = last if last > w0 else w0
                hi = t if t < w1 else w1
                if hi > lo:
                    occ_int[link] += len(q) * (hi - lo)
            occ_last[link] = t
            pkt = q.popleft()
            measured = pkt_gen[pkt] >= w0
            if measured:
                served[link] += 1
                sojourn_sum[link] += t - pkt_link_t[pkt]
            hop = pkt_hop[pkt] + 1
            if hop < len(path_links[pkt_path[pkt]]):
                heappush(events, (t, seq, _ARRIVAL, pkt, hop))
                seq += 1
            elif measured:
                delivered_per_path[pkt_path[pkt]] += 1
                delay_sum[pkt_path[pkt]] += t - pkt_gen[pkt]
            if q:
                head = q[0]
                heappush(events, (t + pkt_size[head] / caps[link], seq, _DEPART, link, 0))
                seq += 1

    window = w1 - w0
    generated = sum(1 for g in pkt_gen if g >= w0)
    mean_delay = np.array(
        [delay_sum[i] / d if (d := delivered_per_path[i]) else np.nan for i in range(n_paths)]
    )
    blocking = np.array([drops[i] / arrivals[i] if arrivals[i] else 0.0 for i in range(n_links)])
    sojourn = np.array(
        [sojourn_sum[i] / served[i] if served[i] else np.nan for i in range(n_links)]
    )
    logger.debug(
        "simulated %s: %d events, %d generated, %d delivered, %d dropped",
        sample.sample_id,
        n_events,
        generated,
        sum(delivered_per_path),
        sum(dropped_per_path),
    )
    return SimResult(
        sample_id=sample.sample_id,
        seed=cfg.seed,
        sim_time=cfg.sim_time,
        warmup_frac=cfg.warmup_frac,
        generated=generated,
        delivered=sum(delivered_per_path),
        dropped=sum(dropped_per_path),
        events=n_events,
        path_ids=tuple(p.id for p in sample.paths),
        path_mean_delay=mean_delay,
        path_delivered=np.array(delivered_per_path, dtype=np.int64),
        path_dropped=np.array(dropped_per_path, dtype=np.int64),
        link_ids=tuple(link.id for link in sample.links),
        link_mean_occupancy=np.array([v / window for v in occ_int]),
        link_blocking=blocking,
        link_mean_sojourn=sojourn,
        link_arrivals=np.array(arrivals, dtype=np.int64),
        link_drops=np.array(drops, dtype=np.int64),
        link_served=np.array(served, dtype=np.int64),
    )


def label_sample(sample: NetworkSample, result: SimResult) -> NetworkSample:
    """Copy the sample with measured mean delays written as path labels.

    Paths that delivered nothing keep their previous label (with a warning);
    everything else is untouched.
    """
    labeled = []
    for path, delay in zip(sample.paths, result.path_mean_delay):
        if np.isnan(delay):
            logger.warning(
                "path %d in sample %s delivered no packets; label unchanged",
                path.id,
                sample.sample_id,
            )
            labeled.append(path)
        else:
            labeled.append(replace(path, label_delay=float(delay)))
    return replace(sample, paths=tuple(labeled))


def _optional(value: float) -> float | None:
    return None if np.isnan(value) else float(value)


def result_to_json(result: SimResult) -> dict:
    """Deterministic JSON-ready dict for one result (see docs/FORMATS.md)."""
    return {
        "sample_id": result.sample_id,
        "seed": result.seed,
        "sim_time": result.sim_time,
        "warmup_frac": result.warmup_frac,
        "generated": result.generated,
        "delivered": result.delivered,
        "dropped": result.dropped,
        "events": result.events,
        "paths": [
            {
                "path_id": pid,
                "mean_delay": _optional(result.path_mean_delay[i]),
                "delivered": int(result.path_delivered[i]),
                "dropped": int(result.path_dropped[i]),
            }
            for i, pid in enumerate(result.path_ids)
        ],
        "links": [
            {
                "link_id": lid,
                "mean_occupancy": float(result.link_mean_occupancy[i]),
                "blocking": float(result.link_blocking[i]),
                "mean_sojourn": _optional(result.link_mean_sojourn[i]),
                "arrivals": int(result.link_arrivals[i]),
                "drops": int(result.link_drops[i]),
                "served": int(result.link_served[i]),
            }
            for i, lid in enumerate(result.link_ids)
        ],
    }


def write_results(results: list[SimResult], path: str | Path) -> Path:
    """Write a list of results as a deterministic JSON file."""
    path = Path(path)
    payload = {"results": [result_to_json(r) for r in results]}
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(payload, fp, indent=2, sort_keys=True)
        fp.write("\n")
    return path
