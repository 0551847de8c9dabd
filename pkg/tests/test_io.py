"""
Tests for the CSV readers and writers
"""

import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from pnm.errors import MalformedRow, UnknownChannel, UnknownKind  # noqa: E402
from pnm.extractor import (  # noqa: E402
    PNM_COLUMNS,
    TICKET_COLUMNS,
    ingest_diagnosis_csv,
    ingest_ground_truth,
    ingest_pnm_csv,
    ingest_tickets_csv,
)
from pnm.loader import (  # noqa: E402
    write_cdf_csv,
    write_diagnosis_csv,
    write_ground_truth_csv,
    write_missing_truth_csv,
    write_pnm_csv,
    write_tickets_csv,
)
from pnm.model import HOUR, Feature, Label, TicketKind  # noqa: E402
from pnm.synth import FaultEvent, GroundTruth  # noqa: E402
from tests.factories import channel, dataset, diagnosis, series, ticket  # noqa: E402


def _write_lines(path: Path, lines) -> Path:
    path.write_text("\n".join(lines) + "\n")
    return path


class TestPnmCsv:
    def setup_method(self):
        self.header = ",".join(PNM_COLUMNS)

    def test_groups_and_sorts(self, tmp_path):
        path = _write_lines(
            tmp_path / "pnm.csv",
            [
                self.header,
                "14400.0,d1,f0,0,31.5,45.0,0.1",
                "0.0,d1,f0,0,30.0,44.0,0.0",
                "0.0,d2,f1,1,29.0,46.0,-0.5",
            ],
        )
        datasets = ingest_pnm_csv(path, interval_hours=4.0, n_channels=2)

        assert sorted(datasets) == ["f0", "f1"]
        first = datasets["f0"].devices["d1"].channels[0]
        np.testing.assert_allclose(first.ts, [0.0, 14400.0])
        np.testing.assert_allclose(first.values[:, 0], [30.0, 31.5])
        assert len(datasets["f0"].devices["d1"].channels[1]) == 0
        assert datasets["f1"].devices["d2"].channels[1].values[0].tolist() == [29.0, 46.0, -0.5]

    def test_bad_number_reports_line(self, tmp_path):
        path = _write_lines(tmp_path / "pnm.csv", [self.header, "0.0,d1,f0,0,30.0,45.0,0.0", "4.0,d1,f0,0,abc,45.0,0.0"])
        with pytest.raises(MalformedRow) as info:
            ingest_pnm_csv(path, 4.0, 1)
        assert info.value.line == 3

    def test_non_finite_rejected(self, tmp_path):
        path = _write_lines(tmp_path / "pnm.csv", [self.header, "0.0,d1,f0,0,nan,45.0,0.0"])
        with pytest.raises(MalformedRow):
            ingest_pnm_csv(path, 4.0, 1)

    def test_wrong_header(self, tmp_path):
        path = _write_lines(tmp_path / "pnm.csv", ["ts,device,fnode", "0.0,d1,f0"])
        with pytest.raises(MalformedRow) as info:
            ingest_pnm_csv(path, 4.0, 1)
        assert info.value.line == 1

    def test_channel_beyond_config(self, tmp_path):
        path = _write_lines(tmp_path / "pnm.csv", [self.header, "0.0,d1,f0,3,30.0,45.0,0.0"])
        with pytest.raises(UnknownChannel):
            ingest_pnm_csv(path, 4.0, 3)

    def test_row_order_does_not_matter(self, tmp_path):
        rng = np.random.default_rng(9)
        rows = [
            f"{ts * 3600.0},d{d},f{d % 2},{c},{rng.normal(30, 2):.3f},{rng.normal(45, 2):.3f},{rng.normal(0, 1):.3f}"
            for d in range(4)
            for c in range(2)
            for ts in (0.0, 4.0, 4.0, 8.1, 12.0)
        ]
        first = ingest_pnm_csv(_write_lines(tmp_path / "a.csv", [self.header, *rows]), 4.0, 2)
        for k in range(3):
            shuffled = [rows[i] for i in rng.permutation(len(rows))]
            again = ingest_pnm_csv(_write_lines(tmp_path / f"b{k}.csv", [self.header, *shuffled]), 4.0, 2)

            assert sorted(again) == sorted(first)
            for fnode_id in first:
                assert again[fnode_id].devices == first[fnode_id].devices

    def test_written_file_reads_back_exactly(self, tmp_path):
        original = {
            "f0": dataset(
                [
                    series("d0", [channel([1.0, 5.1], [30.123456789, 0.1 + 0.2], tx=[45.0, 46.0], rx=[0.3, -1e-7])]),
                    series("d1", [channel([1.5], [28.0])]),
                ]
            )
        }
        path = write_pnm_csv(original, tmp_path / "pnm.csv")
        restored = ingest_pnm_csv(path, 4.0, 1)

        assert restored["f0"].devices == original["f0"].devices


class TestTicketsCsv:
    def test_parses_kind_and_flags(self, tmp_path):
        path = _write_lines(
            tmp_path / "tickets.csv",
            [
                ",".join(TICKET_COLUMNS),
                "t2,d1,f0,200.0,,Service,0",
                "t1,d2,f0,100.0,150.0,maintenance,1",
            ],
        )
        tickets = ingest_tickets_csv(path)

        assert [t.ticket_id for t in tickets] == ["t1", "t2"]
        assert tickets[0].kind is TicketKind.MAINTENANCE and tickets[0].dispatched
        assert tickets[1].close_ts is None

    def test_unknown_kind(self, tmp_path):
        path = _write_lines(tmp_path / "tickets.csv", [",".join(TICKET_COLUMNS), "t1,d1,f0,1.0,,billing,0"])
        with pytest.raises(UnknownKind):
            ingest_tickets_csv(path)

    def test_close_before_open_is_malformed(self, tmp_path):
        path = _write_lines(tmp_path / "tickets.csv", [",".join(TICKET_COLUMNS), "t1,d1,f0,10.0,5.0,service,0"])
        with pytest.raises(MalformedRow) as info:
            ingest_tickets_csv(path)
        assert info.value.line == 2

    def test_round_trip(self, tmp_path):
        tickets = [ticket("t1", "d1", 2.5, dispatched=True), ticket("t0", "d0", 1.0, kind=TicketKind.SERVICE)]
        path = write_tickets_csv(tickets, tmp_path / "tickets.csv")
        assert ingest_tickets_csv(path) == sorted(tickets, key=lambda t: t.open_ts)


class TestEvaluationFiles:
    def test_ground_truth_round_trip(self, tmp_path):
        truth = GroundTruth(
            (FaultEvent("f0-m0", "f0", TicketKind.MAINTENANCE, 0.0, 8 * HOUR, frozenset({"a", "b"})),),
            {("a", 0): frozenset({1, 3}), ("b", 0): frozenset()},
        )
        events = write_ground_truth_csv(truth, tmp_path / "gt.csv")
        missing = write_missing_truth_csv(truth, tmp_path / "missing.csv")
        restored = ingest_ground_truth(events, missing)

        assert restored.events == truth.events
        assert restored.missing == {("a", 0): frozenset({1, 3})}

    def test_diagnosis_round_trip(self, tmp_path):
        timeline = [
            diagnosis("d1", 0, 24, Label.MAINTENANCE, features=[Feature.SNR, Feature.TX_POWER],
                      cluster_ids={Feature.SNR: 0, Feature.TX_POWER: 2}),
            diagnosis("d0", 0, 24, Label.HEALTHY),
        ]
        path = write_diagnosis_csv(timeline, tmp_path / "diagnosis.csv")
        restored = ingest_diagnosis_csv(path)

        assert [d.device_id for d in restored] == ["d0", "d1"]
        assert restored[1].features == frozenset({Feature.SNR, Feature.TX_POWER})
        assert restored[1].cluster_ids == {Feature.SNR: 0, Feature.TX_POWER: 2}
        assert path.read_text().splitlines()[2].endswith("maintenance,snr;tx_power,snr:0;tx_power:2")

    def test_cdf_table(self, tmp_path):
        path = write_cdf_csv([3.0, 1.0, 2.0, 2.0], tmp_path / "cdf.csv")
        assert path.read_text().splitlines() == ["value,cdf", "1.0,0.25", "2.0,0.5", "2.0,0.75", "3.0,1.0"]
