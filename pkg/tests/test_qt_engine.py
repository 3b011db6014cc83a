"""Queueing engine: closed forms vs an exact rational oracle, fixed point."""

from __future__ import annotations

import csv
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, strategies as st

from testutil import line_sample, make_traffic, network_samples, single_link_sample
from qtrn.net_model import Link, NetworkSample, PathFlow
from qtrn.qt_engine import (
    QTConfig,
    blocking_probability,
    delay_factor,
    empty_probability,
    extract_features,
    get_path_delay,
    mean_packet_size,
    occupancy_fraction,
    propagate_traffic,
    run_fixed_point,
    write_feature_csvs,
    write_feature_manifest,
)


def exact_queue_stats(rho: Fraction, buffer_pkts: int) -> tuple[Fraction, Fraction, Fraction]:
    """Independent oracle: (blocking, empty probability, mean queue length).

    Direct rational summation over the truncated geometric distribution
    p_j proportional to rho^j, j = 0..B. No shared code with the engine.
    """
    weights = [rho**j for j in range(buffer_pkts + 1)]
    total = sum(weights)
    probs = [w / total for w in weights]
    mean_len = sum(j * p for j, p in enumerate(probs))
    return probs[-1], probs[0], mean_len


RHO_GRID = [Fraction(1, 10), Fraction(1, 2), Fraction(9, 10), Fraction(2), Fraction(5)]


class TestClosedForms:
    @pytest.mark.parametrize("rho", RHO_GRID, ids=str)
    @pytest.mark.parametrize("buffer_pkts", [1, 4, 32])
    def test_matches_exact_oracle(self, rho, buffer_pkts):
        pb_exact, pi0_exact, mean_exact = exact_queue_stats(rho, buffer_pkts)
        rho_f = float(rho)
        assert blocking_probability(rho_f, buffer_pkts) == pytest.approx(float(pb_exact), abs=1e-12)
        assert empty_probability(rho_f, buffer_pkts) == pytest.approx(float(pi0_exact), abs=1e-12)
        assert occupancy_fraction(rho_f, buffer_pkts) * buffer_pkts == pytest.approx(
            float(mean_exact), abs=1e-12
        )

    def test_exact_limit_at_one(self):
        assert blocking_probability(1.0, 32) == 1.0 / 33.0
        assert empty_probability(1.0, 32) == 1.0 / 33.0
        assert occupancy_fraction(1.0, 32) == pytest.approx(0.5, abs=1e-15)

    @pytest.mark.parametrize("rho", [1.0 - 1e-6, 1.0 + 1e-6])
    def test_continuity_across_singularity(self, rho):
        assert abs(blocking_probability(rho, 32) - 1.0 / 33.0) < 1e-4

    def test_zero_load(self):
        assert blocking_probability(0.0, 32) == 0.0
        assert empty_probability(0.0, 32) == 1.0
        assert occupancy_fraction(0.0, 32) == 0.0

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            blocking_probability(-0.1, 32)
        with pytest.raises(ValueError):
            blocking_probability(float("nan"), 32)
        with pytest.raises(ValueError):
            empty_probability(0.5, 0)
        with pytest.raises(ValueError):
            occupancy_fraction(-1.0, 8)

    @given(
        rho=st.floats(min_value=0.0, max_value=10.0),
        buffer_pkts=st.integers(min_value=1, max_value=64),
    )
    def test_probabilities_bounded(self, rho, buffer_pkts):
        for value in (
            blocking_probability(rho, buffer_pkts),
            empty_probability(rho, buffer_pkts),
            occupancy_fraction(rho, buffer_pkts),
        ):
            assert 0.0 <= value <= 1.0

    @given(
        pair=st.tuples(
            st.floats(min_value=0.0, max_value=10.0), st.floats(min_value=0.0, max_value=10.0)
        ),
        buffer_pkts=st.integers(min_value=1, max_value=64),
    )
    def test_blocking_monotone_in_load(self, pair, buffer_pkts):
        lo, hi = sorted(pair)
        assert blocking_probability(hi, buffer_pkts) >= blocking_probability(lo, buffer_pkts) - 1e-12

    def test_heavy_overload_stays_finite(self):
        assert blocking_probability(1e12, 32) == pytest.approx(1.0, abs=1e-9)
        assert occupancy_fraction(1e12, 32) == pytest.approx(1.0, abs=1e-9)
        assert empty_probability(1e12, 32) == pytest.approx(0.0, abs=1e-12)


class TestDelayFactor:
    def test_known_values_half_load(self):
        # at rho=0.5, B=32: E[N] ~= 1, pi0 ~= 0.5
        assert delay_factor(0.5, 32, "pi0") * 32 == pytest.approx(1.5, rel=1e-8)
        assert delay_factor(0.5, 32, "one") * 32 == pytest.approx(2.0, rel=1e-8)

    def test_bad_mode(self):
        with pytest.raises(ValueError):
            delay_factor(0.5, 32, "two")

    def test_mean_packet_size(self):
        assert mean_packet_size(32000.0, 32) == 1000.0


class TestPropagate:
    def test_two_link_thinning(self):
        sample = NetworkSample(
            sample_id="two",
            n_nodes=3,
            links=(
                Link(id=0, src=0, dst=1, capacity=1000.0, buffer_pkts=32, queue_size_bits=32000.0),
                Link(id=1, src=1, dst=2, capacity=1000.0, buffer_pkts=32, queue_size_bits=32000.0),
            ),
            paths=(PathFlow(id=0, link_seq=(0, 1), traffic=make_traffic(1.0)),),
        )
        per_path, totals = propagate_traffic(sample, [0.5, 0.5])
        np.testing.assert_allclose(per_path[0], [1.0, 0.5])
        np.testing.assert_allclose(totals, [1.0, 0.5])

    def test_wrong_length_rejected(self):
        sample = single_link_sample(0.5)
        with pytest.raises(ValueError, match="shape"):
            propagate_traffic(sample, [0.1, 0.2])

    def test_pb_out_of_range_rejected(self):
        sample = single_link_sample(0.5)
        with pytest.raises(ValueError, match="pb entries"):
            propagate_traffic(sample, [1.5])

    @given(network_samples())
    def test_conservation(self, sample):
        n_links = len(sample.links)
        rows = sample.link_index()
        offered = np.zeros(n_links)
        for path in sample.paths:
            for lid in path.link_seq:
                offered[rows[lid]] += path.traffic.pkts_gen

        _, totals_thinned = propagate_traffic(sample, np.full(n_links, 0.3))
        assert np.all(totals_thinned <= offered + 1e-12)

        _, totals_clear = propagate_traffic(sample, np.zeros(n_links))
        np.testing.assert_allclose(totals_clear, offered, rtol=1e-12)


class TestFixedPoint:
    def test_single_link_half_load(self):
        sample = single_link_sample(0.5)
        states = run_fixed_point(sample, QTConfig())
        (state,) = states
        assert state.rho == pytest.approx(0.5, abs=1e-12)
        assert state.pi0 == pytest.approx(0.5, rel=1e-9)
        # occupancy_frac * B is the mean queue length (~1.0 at rho = 0.5)
        assert state.occupancy_frac == pytest.approx(0.03125, rel=1e-7)
        assert state.link_delay == pytest.approx(1.5, rel=1e-7)

        states_one = run_fixed_point(sample, QTConfig(x_mode="one"))
        assert states_one[0].link_delay == pytest.approx(2.0, rel=1e-7)

    def test_zero_traffic(self):
        sample = single_link_sample(0.0)
        (state,) = run_fixed_point(sample, QTConfig())
        assert state.rho == 0.0
        assert state.pb == 0.0
        assert state.pi0 == 1.0
        assert state.occupancy_frac == 0.0
        # empty network: delay is one mean packet's transmission time
        assert state.link_delay == pytest.approx(1000.0 / 1000.0, abs=1e-15)

    def test_rates_convert_via_mean_packet_size(self):
        # same packet rate, half the packet size -> half the load
        sample = single_link_sample(0.5, queue_size_bits=16000.0)
        (state,) = run_fixed_point(sample, QTConfig())
        assert state.rho == pytest.approx(0.25, abs=1e-12)

    def test_stationary_at_low_load(self):
        sample = line_sample(through_rate=0.1, fresh_rate=0.1)
        five = run_fixed_point(sample, QTConfig(num_iterations=5))
        six = run_fixed_point(sample, QTConfig(num_iterations=6))
        for a, b in zip(five, six):
            assert abs(a.pb - b.pb) < 1e-9

    def test_pb_init_forgotten_at_low_load(self):
        sample = line_sample(through_rate=0.1, fresh_rate=0.1)
        a = run_fixed_point(sample, QTConfig(pb_init=0.3))
        b = run_fixed_point(sample, QTConfig(pb_init=0.0))
        for sa, sb in zip(a, b):
            assert abs(sa.pb - sb.pb) < 1e-9
            assert abs(sa.link_delay - sb.link_delay) < 1e-9

    def test_overload_is_representable(self):
        sample = single_link_sample(3.0)
        (state,) = run_fixed_point(sample, QTConfig())
        assert state.rho > 1.0
        assert 0.0 <= state.pb <= 1.0
        assert state.link_delay > 0.0

    @given(network_samples())
    def test_states_within_bounds(self, sample):
        for state in run_fixed_point(sample, QTConfig()):
            assert 0.0 <= state.pb <= 1.0
            assert 0.0 <= state.pi0 <= 1.0
            assert 0.0 <= state.occupancy_frac <= 1.0
            assert state.link_delay > 0.0
            assert state.total_traffic >= 0.0


class TestPathDelay:
    def test_sums_along_path(self):
        sample = line_sample()
        values = np.arange(1.0, float(len(sample.links)) + 1.0)
        delays = get_path_delay(values, sample)
        assert delays[0] == pytest.approx(values.sum())
        for i in range(len(sample.links)):
            assert delays[i + 1] == pytest.approx(values[i])

    def test_wrong_length(self):
        with pytest.raises(ValueError, match="shape"):
            get_path_delay([1.0, 2.0], single_link_sample(0.5))


class TestExtractFeatures:
    def test_m1_widths(self):
        features = extract_features(line_sample(), variant="m1")
        assert features.b_link.shape == (4, 1)
        assert features.b_path.shape == (5,)
        assert features.link_columns == ("L",)

    def test_m2_widths_and_iterations(self):
        assert QTConfig.for_variant("m1").num_iterations == 5
        assert QTConfig.for_variant("m2").num_iterations == 3
        features = extract_features(line_sample(), variant="m2")
        assert features.b_link.shape == (4, 3)
        assert features.link_columns == ("pi0", "rho", "L")

    def test_b_path_consistent_with_states(self):
        sample = line_sample()
        cfg = QTConfig.for_variant("m1")
        states = run_fixed_point(sample, cfg)
        features = extract_features(sample, variant="m1", cfg=cfg)
        delays = np.array([s.link_delay for s in states])
        np.testing.assert_allclose(features.b_path, get_path_delay(delays, sample), rtol=1e-12)

    def test_l_column_reconstructs_b_path(self):
        # b_path must equal the path sum of L * queue_size / capacity exactly
        sample = line_sample()
        features = extract_features(sample, variant="m2")
        scale = np.array([l.queue_size_bits / l.capacity for l in sample.links])
        per_link = features.b_link[:, 2] * scale
        np.testing.assert_allclose(features.b_path, get_path_delay(per_link, sample), rtol=1e-12)

    def test_bad_variant(self):
        with pytest.raises(ValueError, match="variant"):
            extract_features(line_sample(), variant="m3")


class TestCsvExport:
    def test_files_and_headers(self, tmp_path):
        sample = single_link_sample(0.5)
        links_csv, paths_csv = write_feature_csvs(sample, tmp_path, variant="m2")
        with open(links_csv, newline="") as fp:
            rows = list(csv.reader(fp))
        assert rows[0] == ["link_id", "pi0", "rho", "L"]
        assert len(rows) == 2
        assert float(rows[1][2]) == pytest.approx(0.5, abs=1e-12)
        assert float(rows[1][3]) * 32 == pytest.approx(1.5, rel=1e-7)

        with open(paths_csv, newline="") as fp:
            rows = list(csv.reader(fp))
        assert rows[0] == ["path_id", "baseline_delay"]
        assert float(rows[1][1]) == pytest.approx(1.5, rel=1e-7)

        manifest = write_feature_manifest(tmp_path, ["single"], "m2")
        payload = json.loads(manifest.read_text())
        assert payload == {"samples": ["single"], "variant": "m2"}
