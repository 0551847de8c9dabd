"""
Tests for ticketing rates and the s_f grid search
"""

import math
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from pnm.errors import EmptySpan, NoMaintenanceTickets  # noqa: E402
from pnm.model import HOUR, Feature, Label, TicketKind  # noqa: E402
from pnm.tune import (  # noqa: E402
    SegmentIndex,
    TicketStats,
    TuningResult,
    build_training_windows,
    candidate_mesh,
    feature_stats,
    grid_search_sf,
    search_threshold,
    ticket_stats,
)
from tests.factories import diagnosis, hyper, planted_fnode, ticket  # noqa: E402

T = 24 * HOUR


class TestTicketStats:
    def test_rates_and_ratio(self):
        stats = TicketStats(k_mM=2, k_mS=1, t_M=10.0, t_S=20.0, t_H=70.0)

        assert stats.r_mM == pytest.approx(0.2)
        assert stats.r_mS == pytest.approx(0.05)
        assert stats.trr_m == pytest.approx(4.0)
        assert stats.r_m == pytest.approx(0.03)
        assert stats.normalized()["mM"] == pytest.approx(0.2 / 0.03)
        assert stats.r_sH == 0.0
        assert stats.normalized()["sH"] is None

    def test_undefined_rates(self):
        stats = TicketStats(k_mM=1, t_M=10.0)
        assert stats.r_mS is None
        assert stats.trr_m is None
        assert stats.rank_key() == (0, 0.0)

    def test_rank_key_orders_infinite_above_finite(self):
        infinite = TicketStats(k_mM=1, t_M=10.0, t_S=5.0)
        finite = TicketStats(k_mM=50, k_mS=1, t_M=10.0, t_S=5.0)

        assert infinite.trr_m is None
        assert infinite.rank_key() == (2, pytest.approx(0.1))
        assert infinite.rank_key() > finite.rank_key() > TicketStats().rank_key()

    def test_infinite_ratio_reported_as_inf(self):
        infinite = TuningResult(Feature.SNR, 0.9, TicketStats(k_mM=1, t_M=10.0, t_S=5.0))
        finite = TuningResult(Feature.SNR, 0.9, TicketStats(k_mM=2, k_mS=1, t_M=10.0, t_S=20.0))

        assert infinite.trr_value == math.inf
        assert f"trr_m={infinite.trr_value}" == "trr_m=inf"
        assert finite.trr_value == pytest.approx(4.0)
        assert TuningResult(Feature.SNR, 0.9, TicketStats()).trr_value is None

    def test_addition(self):
        total = TicketStats(k_mM=1, t_M=2.0, uncaptured=1) + TicketStats(k_mM=2, k_sS=1, t_S=3.0)
        assert (total.k_mM, total.k_sS, total.t_M, total.t_S, total.uncaptured) == (3, 1, 2.0, 3.0, 1)

    def test_to_dict(self):
        payload = TicketStats(k_mM=2, k_mS=1, t_M=10.0, t_S=20.0).to_dict()
        assert payload["trr_m"] == pytest.approx(4.0)
        assert set(payload["normalized"]) == {"mM", "mS", "mH", "sM", "sS", "sH"}


class TestTimelineTally:
    def setup_method(self):
        self.timeline = [
            diagnosis("a", 0, 24, Label.MAINTENANCE, per_feature_labels={Feature.SNR: Label.MAINTENANCE}),
            diagnosis("a", 24, 48, Label.HEALTHY),
            diagnosis("b", 0, 24, Label.SERVICE, per_feature_labels={Feature.SNR: Label.HEALTHY}),
            diagnosis("b", 24, 48, Label.HEALTHY),
        ]

    def test_segment_lookup_is_left_open(self):
        index = SegmentIndex(self.timeline)

        assert index.find("f0", "a", 24 * HOUR).end_ts == T
        assert index.find("f0", "a", 24 * HOUR + 1).start_ts == T
        assert index.find("f0", "a", 0.0) is None
        assert index.find("f0", "zz", 1.0) is None

    def test_tickets_counted_by_label(self):
        tickets = [
            ticket("t1", "a", 5.0),
            ticket("t2", "a", 30.0),
            ticket("t3", "b", 10.0),
            ticket("t4", "b", 12.0, kind=TicketKind.SERVICE),
            ticket("t5", "b", 100.0),
        ]
        stats = ticket_stats(self.timeline, tickets)

        assert (stats.k_mM, stats.k_mS, stats.k_mH, stats.k_sS) == (1, 1, 1, 1)
        assert (stats.t_M, stats.t_S, stats.t_H) == (24.0, 24.0, 48.0)
        assert stats.uncaptured == 1
        assert stats.trr_m == pytest.approx(1.0)

    def test_per_feature_labels(self):
        stats = ticket_stats(self.timeline, [ticket("t3", "b", 10.0)], feature=Feature.SNR)

        assert (stats.t_M, stats.t_S, stats.t_H) == (24.0, 0.0, 72.0)
        assert stats.k_mH == 1

    def test_maintenance_tickets_are_conserved(self):
        rng = np.random.default_rng(3)
        tickets = [
            ticket(f"t{i}", str(rng.choice(["a", "b", "c"])), float(rng.uniform(-10.0, 60.0)))
            for i in range(200)
        ]
        stats = ticket_stats(self.timeline, tickets)

        assert stats.k_mM + stats.k_mS + stats.k_mH + stats.uncaptured == len(tickets)
        assert stats.n_service == 0

    def test_empty_timeline(self):
        with pytest.raises(EmptySpan):
            ticket_stats([], [])


class TestCandidateMesh:
    def test_ranges(self):
        pearson_mesh = candidate_mesh(Feature.SNR, 0.01)
        hamming_mesh = candidate_mesh(Feature.MISSING, 0.01)

        assert len(pearson_mesh) == 201 and pearson_mesh[0] == -1.0 and pearson_mesh[-1] == 1.0
        assert len(hamming_mesh) == 101 and hamming_mesh[0] == 0.0
        assert 0.57 in pearson_mesh


class TestSearchThreshold:
    def setup_method(self):
        self.datasets = {"f0": planted_fnode()}
        self.tickets = [ticket(f"m{i}", f"f0-m{i:02d}", 12.0) for i in range(8)]
        self.tickets.append(ticket("s0", "f0-s00", 12.0, kind=TicketKind.SERVICE))
        self.windows = build_training_windows(self.datasets, self.tickets, hyper(), [T])

    def test_training_windows_count_tickets(self):
        assert len(self.windows) == 1
        window = self.windows[0]
        assert window.hours == 24.0
        assert int(window.maintenance.sum()) == 8
        assert int(window.service[window.state.device_ids.index("f0-s00")]) == 1

    def test_feature_stats_cut_per_threshold(self):
        tight = feature_stats(self.windows, Feature.SNR, 0.9, 5)
        loose = feature_stats(self.windows, Feature.SNR, -0.5, 5)

        assert (tight.t_M, tight.t_S, tight.k_mM) == (8 * 24.0, 24.0, 8)
        assert (loose.t_M, loose.t_S) == (12 * 24.0, 0.0)

    def test_ties_go_to_larger_threshold(self):
        result = search_threshold(self.windows, Feature.SNR, 5, [0.5, -0.5, 0.9])

        assert result.s_f == 0.9
        assert result.stats.rank_key()[0] == 2
        assert [s for s, _ in result.scores] == [-0.5, 0.5, 0.9]

    def test_needs_maintenance_tickets(self):
        service_only = [t for t in self.tickets if t.kind is TicketKind.SERVICE]
        windows = build_training_windows(self.datasets, service_only, hyper(), [T])
        with pytest.raises(NoMaintenanceTickets):
            search_threshold(windows, Feature.SNR, 5, [0.5])
        with pytest.raises(ValueError):
            search_threshold(self.windows, Feature.SNR, 5, [])

    def test_choice_ignores_ticket_scale(self):
        mesh = candidate_mesh(Feature.SNR, 0.1)
        scaled = [replace(w, maintenance=w.maintenance * 4, service=w.service * 4) for w in self.windows]

        base = search_threshold(self.windows, Feature.SNR, 5, mesh)
        assert search_threshold(scaled, Feature.SNR, 5, mesh).s_f == base.s_f

    def test_grid_search_end_to_end(self):
        result = grid_search_sf(self.datasets, self.tickets, Feature.TX_POWER, hyper(), [T], candidates=np.array([0.2, 0.95]))
        assert result.feature is Feature.TX_POWER
        assert result.s_f == 0.95
