"""Finite-buffer queueing baseline for per-path delay prediction.

Each link is modeled as an M/M/1/B queue: Poisson packet arrivals, exponential
service, and room for at most B packets including the one in service. The
stationary distribution is the truncated geometric p_j = pi0 * rho^j for
j = 0..B, which yields closed forms for the blocking probability (p_B), the
empty probability (p_0) and the mean queue length E[N].

Per-link offered traffic is obtained by traffic balance: a path's demand is
thinned by the blocking probability of every upstream link, and per-link
totals are the sums over the paths that cross the link. Blocking depends on
the loads and the loads depend on blocking, so the engine iterates the two
maps a fixed number of rounds from a constant initial guess; residuals are
logged for diagnostics only, never used as a stopping rule.

All closed forms are evaluated in numerically stable branches: loads above
one are handled through reciprocal powers (the formulas stay in [0, 1] for
any finite load) and the removable singularity at rho = 1 is replaced by its
analytic limit inside a small epsilon window.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from qtrn.net_model import NetworkSample

__all__ = [
    "QTConfig",
    "QTFeatureSet",
    "QTLinkState",
    "RHO_EPS",
    "blocking_probability",
    "delay_factor",
    "empty_probability",
    "extract_features",
    "get_path_delay",
    "mean_packet_size",
    "occupancy_fraction",
    "propagate_traffic",
    "run_fixed_point",
    "write_feature_csvs",
    "write_feature_manifest",
]

logger = logging.getLogger(__name__)

# Width of the epsilon window around rho = 1 inside which the analytic
# limits of the closed forms are used instead of the raw expressions.
RHO_EPS = 1e-9

VARIANTS = ("m1", "m2")

# Fixed-point rounds per model variant; the larger model refines features
# with more balance iterations.
_VARIANT_ITERATIONS = {"m1": 5, "m2": 3}

LINK_FEATURE_COLUMNS = {"m1": ("L",), "m2": ("pi0", "rho", "L")}


@dataclass(frozen=True)
class QTConfig:
    """Knobs of the queueing baseline.

    num_iterations: fixed number of traffic-balance rounds (no tolerance
        based stopping; the count is part of the method's definition).
    pb_init: initial blocking probability assumed on every link.
    x_mode: extra term in the per-link delay factor, either "one" (counts the
        packet in service, exact for a single queue) or "pi0" (empirically
        tuned variant; the default).
    rho_eps: half-width of the analytic-limit window around rho = 1.
    """

    num_iterations: int = 5
    pb_init: float = 0.3
    x_mode: str = "pi0"
    rho_eps: float = RHO_EPS

    def __post_init__(self) -> None:
        if self.num_iterations < 1:
            raise ValueError(f"num_iterations must be >= 1, got {self.num_iterations}")
        if not 0.0 <= self.pb_init < 1.0:
            raise ValueError(f"pb_init must be in [0, 1), got {self.pb_init}")
        if self.x_mode not in ("one", "pi0"):
            raise ValueError(f"x_mode must be 'one' or 'pi0', got {self.x_mode!r}")
        if not self.rho_eps > 0:
            raise ValueError(f"rho_eps must be positive, got {self.rho_eps}")

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "QTConfig":
        """Default configuration for a model variant (m1: 5 rounds, m2: 3)."""
        if variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
        overrides.setdefault("num_iterations", _VARIANT_ITERATIONS[variant])
        return cls(**overrides)


@dataclass(frozen=True)
class QTLinkState:
    """Converged per-link state of the queueing baseline.

    total_traffic is the offered packet rate after upstream thinning, rho the
    load (offered bit rate over capacity), pb/pi0 the blocking and empty
    probabilities, occupancy_frac the mean queue length divided by the buffer
    size B (in [0, 1]) and link_delay the mean per-packet delay contribution
    of this link in time units.
    """

    link_id: int
    total_traffic: float
    rho: float
    pb: float
    pi0: float
    occupancy_frac: float
    link_delay: float


@dataclass(frozen=True)
class QTFeatureSet:
    """Baseline features of one sample, ready for export or model input.

    b_link rows follow link id order with columns LINK_FEATURE_COLUMNS[variant];
    the "L" column is the per-link delay factor, so a path's baseline delay
    equals the sum of L * queue_size_bits / capacity over its links. b_path is
    exactly that sum per path (in time units, never rescaled).
    """

    sample_id: str
    variant: str
    link_ids: tuple[int, ...]
    path_ids: tuple[int, ...]
    b_link: np.ndarray
    b_path: np.ndarray

    @property
    def link_columns(self) -> tuple[str, ...]:
        return LINK_FEATURE_COLUMNS[self.variant]


def _check_buffer(buffer_pkts: int) -> None:
    if buffer_pkts < 1:
        raise ValueError(f"buffer_pkts must be >= 1, got {buffer_pkts}")


def _check_rho(rho: float) -> None:
    if not math.isfinite(rho) or rho < 0:
        raise ValueError(f"rho must be finite and >= 0, got {rho}")


def blocking_probability(rho: float, buffer_pkts: int, eps: float = RHO_EPS) -> float:
    """Probability that an arriving packet finds the buffer full.

    Evaluates (1-rho)*rho^B / (1-rho^(B+1)) for a buffer of B packets, with
    the analytic limit 1/(B+1) inside |rho - 1| <= eps and a reciprocal-power
    rewrite for rho > 1 that avoids overflow. Result is in [0, 1].
    """
    _check_rho(rho)
    _check_buffer(buffer_pkts)
    b = buffer_pkts
    if abs(1.0 - rho) <= eps:
        return 1.0 / (b + 1)
    if rho == 0.0:
        return 0.0
    if rho < 1.0:
        return (1.0 - rho) * rho**b / (1.0 - rho ** (b + 1))
    r = 1.0 / rho
    return (1.0 - r) / (1.0 - r ** (b + 1))


def empty_probability(rho: float, buffer_pkts: int, eps: float = RHO_EPS) -> float:
    """Stationary probability of an empty queue, (1-rho) / (1-rho^(B+1))."""
    _check_rho(rho)
    _check_buffer(buffer_pkts)
    b = buffer_pkts
    if abs(1.0 - rho) <= eps:
        return 1.0 / (b + 1)
    if rho < 1.0:
        return (1.0 - rho) / (1.0 - rho ** (b + 1))
    r = 1.0 / rho
    return r**b * (1.0 - r) / (1.0 - r ** (b + 1))


def _state_probs(rho: float, buffer_pkts: int, eps: float) -> np.ndarray:
    """Stationary distribution p_0..p_B, computed from normalized weights.

    Weights are rho^j for rho < 1 and rho^(j-B) for rho > 1 so the largest
    weight is always 1 and nothing overflows for any finite load.
    """
    b = buffer_pkts
    j = np.arange(b + 1, dtype=np.float64)
    if abs(1.0 - rho) <= eps:
        return np.full(b + 1, 1.0 / (b + 1))
    if rho < 1.0:
        w = rho**j
    else:
        w = (1.0 / rho) ** (b - j)
    return w / w.sum()


def occupancy_fraction(rho: float, buffer_pkts: int, eps: float = RHO_EPS) -> float:
    """Mean queue length E[N] divided by the buffer size B; in [0, 1].

    E[N] = sum_j j * p_j over the stationary distribution. The limit at
    rho = 1 is 1/2 and the fraction tends to 1 under heavy overload.
    """
    _check_rho(rho)
    _check_buffer(buffer_pkts)
    p = _state_probs(rho, buffer_pkts, eps)
    mean_len = float(np.arange(buffer_pkts + 1, dtype=np.float64) @ p)
    return mean_len / buffer_pkts


def delay_factor(rho: float, buffer_pkts: int, x_mode: str = "pi0", eps: float = RHO_EPS) -> float:
    """Dimensionless per-link delay factor (x + E[N]) / B.

    x is 1 with x_mode="one" or the empty probability with x_mode="pi0".
    Multiplied by queue_size_bits / capacity this gives the link's mean
    per-packet delay in time units.
    """
    if x_mode == "one":
        x = 1.0
    elif x_mode == "pi0":
        x = empty_probability(rho, buffer_pkts, eps)
    else:
        raise ValueError(f"x_mode must be 'one' or 'pi0', got {x_mode!r}")
    return x / buffer_pkts + occupancy_fraction(rho, buffer_pkts, eps)


def mean_packet_size(queue_size_bits: float, buffer_pkts: int) -> float:
    """Mean packet size in bits implied by a link's buffer provisioning."""
    _check_buffer(buffer_pkts)
    return queue_size_bits / buffer_pkts


def propagate_traffic(
    sample: NetworkSample, pb: Sequence[float] | np.ndarray
) -> tuple[list[np.ndarray], np.ndarray]:
    """Thin each path's demand by upstream blocking and total it per link.

    The rate a path offers to its j-th link is its demand multiplied by
    (1 - pb) of every earlier link on the path; pb is indexed by link row
    (id order). Returns (per-path arrays of per-hop offered rates, per-link
    totals). Raises ValueError when pb has the wrong length.
    """
    pb = np.asarray(pb, dtype=np.float64)
    n_links = len(sample.links)
    if pb.shape != (n_links,):
        raise ValueError(f"pb must have shape ({n_links},), got {pb.shape}")
    if np.any((pb < 0) | (pb > 1)):
        raise ValueError("pb entries must lie in [0, 1]")

    rows = sample.link_index()
    totals = np.zeros(n_links, dtype=np.float64)
    per_path: list[np.ndarray] = []
    for path in sample.paths:
        rate = path.traffic.pkts_gen
        hops = np.empty(len(path.link_seq), dtype=np.float64)
        for j, link_id in enumerate(path.link_seq):
            row = rows[link_id]
            hops[j] = rate
            totals[row] += rate
            rate *= 1.0 - pb[row]
        per_path.append(hops)
    return per_path, totals


def run_fixed_point(sample: NetworkSample, cfg: QTConfig | None = None) -> list[QTLinkState]:
    """Run the traffic-balance fixed point and return per-link states.

    Starts from pb = cfg.pb_init on every link and alternates traffic
    propagation with blocking updates for exactly cfg.num_iterations rounds.
    Loads convert packet rates to bit rates through each link's mean packet
    size. The final residual (largest blocking change in the last round) is
    logged at DEBUG level.
    """
    cfg = cfg or QTConfig()
    n_links = len(sample.links)
    buffers = np.array([link.buffer_pkts for link in sample.links], dtype=np.int64)
    capacity = np.array([link.capacity for link in sample.links], dtype=np.float64)
    pkt_bits = np.array(
        [mean_packet_size(link.queue_size_bits, link.buffer_pkts) for link in sample.links],
        dtype=np.float64,
    )

    pb = np.full(n_links, cfg.pb_init, dtype=np.float64)
    rho = np.zeros(n_links, dtype=np.float64)
    totals = np.zeros(n_links, dtype=np.float64)
    residual = 0.0
    for _ in range(cfg.num_iterations):
        _, totals = propagate_traffic(sample, pb)
        rho = totals * pkt_bits / capacity
        new_pb = np.array(
            [blocking_probability(r, int(b), cfg.rho_eps) for r, b in zip(rho, buffers)]
        )
        residual = float(np.max(np.abs(new_pb - pb))) if n_links else 0.0
        pb = new_pb
    logger.debug(
        "fixed point on %s: %d links, %d rounds, final residual %.3e",
        sample.sample_id,
        n_links,
        cfg.num_iterations,
        residual,
    )

    states = []
    for i, link in enumerate(sample.links):
        occ = occupancy_fraction(float(rho[i]), link.buffer_pkts, cfg.rho_eps)
        factor = delay_factor(float(rho[i]), link.buffer_pkts, cfg.x_mode, cfg.rho_eps)
        states.append(
            QTLinkState(
                link_id=link.id,
                total_traffic=float(totals[i]),
                rho=float(rho[i]),
                pb=float(pb[i]),
                pi0=empty_probability(float(rho[i]), link.buffer_pkts, cfg.rho_eps),
                occupancy_frac=occ,
                link_delay=factor * link.queue_size_bits / link.capacity,
            )
        )
    return states


def get_path_delay(per_link_values: Sequence[float] | np.ndarray, sample: NetworkSample) -> np.ndarray:
    """Sum a per-link quantity along each path's link sequence.

    per_link_values is indexed by link row (id order); repeated traversals
    count once per hop. Returns one value per path in path id order.
    """
    values = np.asarray(per_link_values, dtype=np.float64)
    n_links = len(sample.links)
    if values.shape != (n_links,):
        raise ValueError(f"per_link_values must have shape ({n_links},), got {values.shape}")
    rows = sample.link_index()
    out = np.zeros(len(sample.paths), dtype=np.float64)
    for i, path in enumerate(sample.paths):
        out[i] = sum(values[rows[lid]] for lid in path.link_seq)
    return out


def extract_features(
    sample: NetworkSample, variant: str = "m1", cfg: QTConfig | None = None
) -> QTFeatureSet:
    """Produce per-link and per-path baseline features for one sample.

    Link feature rows are [L] for variant m1 and [pi0, rho, L] for m2, where
    L is the delay factor of each link. Path features are the baseline delay
    predictions in time units. Values are physical quantities; any
    standardization happens downstream and never touches these.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    cfg = cfg or QTConfig.for_variant(variant)
    states = run_fixed_point(sample, cfg)

    factors = np.array(
        [
            delay_factor(s.rho, link.buffer_pkts, cfg.x_mode, cfg.rho_eps)
            for s, link in zip(states, sample.links)
        ]
    )
    if variant == "m1":
        b_link = factors.reshape(-1, 1)
    else:
        b_link = np.column_stack(
            [np.array([s.pi0 for s in states]), np.array([s.rho for s in states]), factors]
        )
    link_delays = np.array([s.link_delay for s in states])
    b_path = get_path_delay(link_delays, sample)
    return QTFeatureSet(
        sample_id=sample.sample_id,
        variant=variant,
        link_ids=tuple(link.id for link in sample.links),
        path_ids=tuple(path.id for path in sample.paths),
        b_link=b_link,
        b_path=b_path,
    )


def _full_link_rows(sample: NetworkSample, cfg: QTConfig) -> list[tuple[int, float, float, float]]:
    states = run_fixed_point(sample, cfg)
    rows = []
    for state, link in zip(states, sample.links):
        factor = delay_factor(state.rho, link.buffer_pkts, cfg.x_mode, cfg.rho_eps)
        rows.append((link.id, state.pi0, state.rho, factor))
    return rows


def write_feature_csvs(
    sample: NetworkSample, out_dir: str | Path, variant: str = "m1", cfg: QTConfig | None = None
) -> tuple[Path, Path]:
    """Write one sample's features as two CSV files in out_dir.

    <sample_id>.links.csv has columns link_id,pi0,rho,L (all three state
    columns regardless of variant) and <sample_id>.paths.csv has columns
    path_id,baseline_delay. Returns the two file paths.
    """
    if variant not in VARIANTS:
        raise ValueError(f"variant must be one of {VARIANTS}, got {variant!r}")
    cfg = cfg or QTConfig.for_variant(variant)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    features = extract_features(sample, variant=variant, cfg=cfg)
    links_path = out_dir / f"{sample.sample_id}.links.csv"
    with open(links_path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(["link_id", "pi0", "rho", "L"])
        for link_id, pi0, rho, factor in _full_link_rows(sample, cfg):
            writer.writerow([link_id, repr(pi0), repr(rho), repr(factor)])

    paths_path = out_dir / f"{sample.sample_id}.paths.csv"
    with open(paths_path, "w", newline="", encoding="utf-8") as fp:
        writer = csv.writer(fp)
        writer.writerow(["path_id", "baseline_delay"])
        for path_id, delay in zip(features.path_ids, features.b_path):
            writer.writerow([path_id, repr(float(delay))])
    return links_path, paths_path


def write_feature_manifest(
    out_dir: str | Path, sample_ids: Iterable[str], variant: str
) -> Path:
    """Write the manifest listing exported sample ids and the variant used."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {"samples": sorted(sample_ids), "variant": variant}
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as fp:
        json.dump(manifest, fp, indent=2, sort_keys=True)
        fp.write("\n")
    return path
