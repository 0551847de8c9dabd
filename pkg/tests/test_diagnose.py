"""
Tests for the per-fNode diagnosis pipeline in batch and reactive modes
"""

import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from pnm.cluster import Partition  # noqa: E402
from pnm.detect import DeviceAnomaly  # noqa: E402
from pnm.diagnose import (  # noqa: E402
    FNodeDiagnoser,
    combine_labels,
    daily_schedule,
    diagnose_fnode,
    extract_events,
    feature_labels,
    reactive_labels,
    run_batch,
    run_reactive,
    schedule_segments,
)
from pnm.errors import EmptyWindow, UnknownDevice  # noqa: E402
from pnm.model import HOUR, Feature, Label, Linkage, Preprocessing, ReactiveLabel  # noqa: E402
from tests.factories import diagnosis, hyper, planted_fnode, ticket  # noqa: E402

T = 24 * HOUR


def expected(device_id: str) -> Label:
    kind = device_id.split("-")[1][0]
    return {"m": Label.MAINTENANCE, "s": Label.SERVICE, "h": Label.HEALTHY}[kind]


class TestLabelRules:
    def test_feature_labels_by_cluster_size(self):
        partition = Partition.from_labels(list("abcdef"), [0, 0, 0, 1, 1, 2])
        labels = feature_labels(partition, {"a": True, "d": True}, cluster_size_threshold=3)

        assert labels == {
            "a": Label.MAINTENANCE,
            "b": Label.MAINTENANCE,
            "c": Label.MAINTENANCE,
            "d": Label.SERVICE,
            "e": Label.SERVICE,
            "f": Label.HEALTHY,
        }

    def test_maintenance_dominates(self):
        per_feature = {Feature.SNR: Label.SERVICE, Feature.TX_POWER: Label.MAINTENANCE}
        assert combine_labels(per_feature, DeviceAnomaly()) is Label.MAINTENANCE

    def test_anomaly_alone_is_service(self):
        healthy = {feature: Label.HEALTHY for feature in Feature}
        assert combine_labels(healthy, DeviceAnomaly(rx_power=True)) is Label.SERVICE
        assert combine_labels(healthy, DeviceAnomaly()) is Label.HEALTHY


class TestDiagnoseFNode:
    def test_planted_faults(self):
        labels = diagnose_fnode(planted_fnode(), hyper(), T)

        assert len(labels) == 12
        for device_id, d in labels.items():
            assert d.label is expected(device_id), device_id
        assert labels["f0-m00"].features == frozenset({Feature.SNR, Feature.TX_POWER})
        assert labels["f0-s00"].per_feature_labels[Feature.SNR] is Label.SERVICE
        assert labels["f0-m00"].cluster_ids[Feature.SNR] == labels["f0-m05"].cluster_ids[Feature.SNR]

    def test_small_cluster_becomes_service(self):
        labels = diagnose_fnode(planted_fnode(), hyper(cluster_size_threshold=9), T)
        assert labels["f0-m00"].label is Label.SERVICE

    def test_size_rule_is_inclusive(self):
        labels = diagnose_fnode(planted_fnode(), hyper(cluster_size_threshold=8), T)
        assert labels["f0-m00"].label is Label.MAINTENANCE

    def test_raising_size_threshold_never_creates_maintenance(self):
        fnode = planted_fnode(n_healthy=6)
        previous = None
        for c_thr in range(1, 16):
            result = diagnose_fnode(fnode, hyper(cluster_size_threshold=c_thr), T)
            labels = {device_id: d.label for device_id, d in result.items()}
            if previous is not None:
                for device_id, label in labels.items():
                    if previous[device_id] is Label.SERVICE:
                        assert label is Label.SERVICE, (c_thr, device_id)
                    if label is Label.MAINTENANCE:
                        assert previous[device_id] is Label.MAINTENANCE, (c_thr, device_id)
            previous = labels

    def test_quiet_fnode_is_healthy(self):
        labels = diagnose_fnode(planted_fnode(n_maintenance=0, with_service=False), hyper(), T)
        assert {d.label for d in labels.values()} == {Label.HEALTHY}

    @pytest.mark.parametrize(
        "updates",
        [
            {"linkage": Linkage.DBSCAN},
            {"linkage": Linkage.COMPLETE},
            {"preprocessing": Preprocessing.RESAMPLE},
            {"features": (Feature.SNR,)},
        ],
    )
    def test_variants_agree_on_planted_faults(self, updates):
        labels = diagnose_fnode(planted_fnode(), hyper(**updates), T)
        for device_id, d in labels.items():
            assert d.label is expected(device_id), device_id

    def test_empty_window(self):
        diagnoser = FNodeDiagnoser(planted_fnode(), hyper())
        with pytest.raises(EmptyWindow):
            diagnoser.window_state(10 * T)

    def test_dendrograms_are_reused_across_thresholds(self):
        state = FNodeDiagnoser(planted_fnode(), hyper()).window_state(T)

        assert state.features == [Feature.SNR, Feature.TX_POWER, Feature.MISSING]
        assert len(state.partition(Feature.SNR, 0.8).cluster_of("f0-m00")) == 8
        assert len(state.partition(Feature.SNR, -1.0).clusters) == 1


class TestSchedule:
    def test_segments(self):
        assert schedule_segments([T, 1.5 * T], T) == [(0.0, T), (T, 1.5 * T)]
        with pytest.raises(ValueError):
            schedule_segments([T, T], T)

    def test_daily_schedule_covers_span(self):
        assert daily_schedule(1 * HOUR, 95 * HOUR) == [T, 2 * T, 3 * T, 4 * T]
        assert daily_schedule(0.0, 1.0) == [T]


class TestBatch:
    def test_fault_spanning_days_is_one_event(self):
        fnode = planted_fnode(n_days=4, fault_days=[0, 1, 2])
        timeline = run_batch({"f0": fnode}, hyper(), daily_schedule(*fnode.span()))

        assert len(timeline) == 12 * 4
        runs = [run for run in extract_events(timeline) if run.device_id == "f0-m03"]
        assert len(runs) == 1
        assert runs[0].label is Label.MAINTENANCE
        assert runs[0].duration_hours == 72.0

    def test_output_sorted_across_fnodes(self):
        datasets = {f: planted_fnode(fnode_id=f) for f in ("f1", "f0")}
        timeline = run_batch(datasets, hyper(), [T])

        keys = [(d.fnode_id, d.device_id, d.start_ts) for d in timeline]
        assert keys == sorted(keys)
        assert {d.fnode_id for d in timeline} == {"f0", "f1"}

    def test_empty_windows_are_skipped(self):
        timeline = run_batch({"f0": planted_fnode()}, hyper(), [T, 3 * T])
        assert {d.end_ts for d in timeline} == {T}

    def test_extract_events_splits_on_label_change(self):
        timeline = [
            diagnosis("a", 0, 24, Label.SERVICE),
            diagnosis("a", 24, 48, Label.SERVICE),
            diagnosis("a", 48, 72, Label.MAINTENANCE),
            diagnosis("a", 72, 96, Label.HEALTHY),
            diagnosis("a", 96, 120, Label.MAINTENANCE),
        ]
        runs = extract_events(timeline)

        assert [(r.label, r.start_ts / HOUR, r.end_ts / HOUR) for r in runs] == [
            (Label.SERVICE, 0, 48),
            (Label.MAINTENANCE, 48, 72),
            (Label.MAINTENANCE, 96, 120),
        ]


class TestReactive:
    def setup_method(self):
        self.datasets = {"f0": planted_fnode()}

    def test_ticket_device_label(self):
        assert run_reactive(self.datasets, hyper(), ticket("t1", "f0-m02", 24.0)) is ReactiveLabel.MAINTENANCE
        assert run_reactive(self.datasets, hyper(), ticket("t2", "f0-h00", 24.0)) is ReactiveLabel.NO_ISSUE

    def test_unknown_device(self):
        with pytest.raises(UnknownDevice):
            run_reactive(self.datasets, hyper(), ticket("t1", "nobody", 24.0))
        with pytest.raises(UnknownDevice):
            run_reactive(self.datasets, hyper(), ticket("t1", "f0-m00", 24.0, fnode_id="f9"))

    def test_many_tickets(self):
        tickets = [
            ticket("t1", "f0-s00", 24.0),
            ticket("t2", "nobody", 24.0),
            ticket("t3", "f0-m00", 200.0),
            ticket("t4", "x", 24.0, fnode_id="f9"),
        ]
        assert reactive_labels(self.datasets, hyper(), tickets) == {"t1": ReactiveLabel.SERVICE}
