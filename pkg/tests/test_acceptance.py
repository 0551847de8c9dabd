"""
Acceptance suites on synthetic deployments with planted faults

Each suite generates one deployment, trains on its first half with the real
`train` command and scores the calibrated pipeline against the generator's
ground truth. Suite sizes are scaled down from the full-size runs; DESIGN.md
lists both.
"""

import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent.parent / "src"))

from core.config import PipelineConfig  # noqa: E402
from core.orchestrator import PipelineOrchestrator  # noqa: E402
from pnm.diagnose import Diagnosis, daily_schedule, diagnose_fnode, label_window, reactive_labels  # noqa: E402
from pnm.evaluation import (  # noqa: E402
    labeled_rand_indices,
    maintenance_recall,
    mean_scores,
    normalized_rate_report,
)
from pnm.model import DAY, HOUR, Feature, HyperParams, Linkage, Preprocessing, TicketKind  # noqa: E402
from pnm.preprocess import align  # noqa: E402
from pnm.synth import SynthConfig, SynthOutput, generate  # noqa: E402
from pnm.tune import TrainingWindow, build_training_windows, candidate_mesh  # noqa: E402
from tests.factories import hyper  # noqa: E402

pytestmark = pytest.mark.acceptance

L = 4.0
SPLIT = 3 * DAY

# Fault amplitude is 3x the noise sigma; tickets follow a multiplier model with 10% label noise
QUALITY = {
    "n_fnodes": 8,
    "devices_per_fnode": 50,
    "duration_days": 6.0,
    "noise_sigma": 0.5,
    "device_spread": 0.25,
    "channel_spread": 0.1,
    "faults": {
        "maintenance_per_fnode": 1,
        "maintenance_size": [8, 12],
        "service_per_fnode": 2,
        "duration_epochs": [9, 15],
        "shapes": ["step", "square"],
        "amplitude_db": [1.5, 1.5],
        "wobble": 0.5,
        "outage_fraction": 0.0,
    },
    "tickets": {
        "baseline_rate": 1.0,
        "maintenance_multiplier": 20.0,
        "service_multiplier": 30.0,
        "baseline_maintenance_fraction": 0.1,
        "mislabel_m_to_s": 0.1,
        "mislabel_s_to_m": 0.1,
    },
}

LOSSY = {
    **QUALITY,
    "n_fnodes": 6,
    "p_loss": 0.1,
    "jitter_hours": 1.9,
}


@dataclass
class Fitted:
    """A trained configuration with its window states over the whole span."""

    config: PipelineConfig
    output: SynthOutput
    windows: List[TrainingWindow]

    @property
    def hyper(self) -> HyperParams:
        return self.config.hyper_params()

    def with_threshold(self, s_f: float) -> HyperParams:
        base = self.hyper
        thresholds = {**base.similarity_thresholds, Feature.SNR: s_f, Feature.TX_POWER: s_f}
        return base.model_copy(update={"similarity_thresholds": thresholds})

    def timeline(self, params: Optional[HyperParams] = None, since: float = 0.0) -> List[Diagnosis]:
        params = params or self.hyper
        timeline = [
            d
            for window in self.windows
            if window.segment[0] >= since
            for d in label_window(window.state, params, window.segment)
        ]
        return sorted(timeline, key=lambda d: (d.fnode_id, d.device_id, d.start_ts))

    def scores(self, params: Optional[HyperParams] = None) -> Dict[str, object]:
        labeled = labeled_rand_indices(self.timeline(params), self.output.truth, self.output.datasets)
        return {**mean_scores(labeled), "windows": len(labeled)}


class Deployment:
    """One synthetic deployment on disk, trained once per pipeline variant."""

    def __init__(self, directory: Path, synth: dict):
        self.config = PipelineConfig.model_validate(
            {
                "paths": {"pnm": "pnm.csv", "tickets": "tickets.csv", "output_dir": "out"},
                "seed": 11,
                "split_ts": SPLIT,
                "mesh_step": 0.05,
                "synth": synth,
                "base_dir": directory,
            }
        )
        result = PipelineOrchestrator(self.config).synth()
        assert result.success, result.error_message
        self.output = generate(self.config.synth_config())
        self.schedule = daily_schedule(0.0, self.config.synth_config().end_ts)
        self._fitted: Dict[tuple, Fitted] = {}

    def fit(self, **overrides) -> Fitted:
        key = tuple(sorted(overrides.items()))
        if key not in self._fitted:
            orchestrator = PipelineOrchestrator(self.config.with_overrides(**overrides))
            result = orchestrator.train()
            assert result.success, result.error_message
            config = orchestrator.config
            windows = build_training_windows(
                self.output.datasets, self.output.tickets, config.training_hyper(), self.schedule
            )
            self._fitted[key] = Fitted(config, self.output, windows)
        return self._fitted[key]


@pytest.fixture(scope="module")
def quality(tmp_path_factory):
    return Deployment(tmp_path_factory.mktemp("quality"), QUALITY)


@pytest.fixture(scope="module")
def lossy(tmp_path_factory):
    return Deployment(tmp_path_factory.mktemp("lossy"), LOSSY)


class TestAlignmentTheorem:
    def test_same_period_points_pair_up(self):
        rng = np.random.default_rng(2024)
        instances = 0
        while instances < 500:
            n = int(rng.integers(1, 13))
            kept_x = np.flatnonzero(rng.random(n) < 0.75)
            kept_y = np.flatnonzero(rng.random(n) < 0.75)
            if not len(kept_x) or not len(kept_y):
                continue
            instances += 1
            tx = (kept_x * L + rng.uniform(0, 0.475 * L, len(kept_x))) * HOUR
            ty = (kept_y * L + rng.uniform(0, 0.475 * L, len(kept_y))) * HOUR
            pairs = set(align(tx, ty).pairs)

            distance = np.abs(tx[:, None] - ty[None, :])
            mutual = {
                (i, j)
                for i in range(len(tx))
                for j in range(len(ty))
                if distance[i, j] == distance[i].min() and distance[i, j] == distance[:, j].min()
            }
            assert pairs == mutual

            shared = set(kept_x.tolist()) & set(kept_y.tolist())
            same_period = {(int(np.flatnonzero(kept_x == k)[0]), int(np.flatnonzero(kept_y == k)[0])) for k in shared}
            assert same_period <= pairs

            # every pair of any alternative pairing is some (i, j) of the distance matrix
            assert min(distance[i, j] for i, j in pairs) <= distance.min()


class TestClusteringQuality:
    def test_labeled_agreement(self, quality):
        scores = quality.fit().scores()

        assert scores["windows"] >= 8
        assert scores["ri"] >= 0.90
        assert scores["ari"] >= 0.80

    @pytest.mark.parametrize("linkage", [Linkage.SINGLE, Linkage.COMPLETE, Linkage.DBSCAN])
    def test_average_linkage_is_at_least_as_good(self, quality, linkage):
        average = quality.fit().scores()["ari"]
        assert average >= quality.fit(linkage=linkage).scores()["ari"]

    def test_tuned_threshold_is_near_oracle(self, quality):
        fitted = quality.fit()
        tuned = fitted.scores()["ri"]
        mesh = candidate_mesh(Feature.SNR, 0.05)
        oracle = max(fitted.scores(fitted.with_threshold(float(s_f)))["ri"] for s_f in mesh)

        assert tuned >= oracle - 0.02


class TestPreprocessing:
    def test_alignment_beats_resampling_under_loss(self, lossy):
        aligned = lossy.fit().scores()["ari"]
        resampled = lossy.fit(preprocessing=Preprocessing.RESAMPLE).scores()["ari"]

        assert aligned - resampled >= 0.10


class TestTicketing:
    def test_normalized_rate_invariants(self, quality):
        fitted = quality.fit()
        tickets = [t for t in quality.output.tickets if t.open_ts >= SPLIT]
        report = normalized_rate_report(fitted.timeline(since=SPLIT), tickets)

        assert report.all_hold
        assert report.normalized["mM"] >= 2
        assert report.normalized["sS"] >= 2
        assert report.healthy_below_baseline == {"mH": True, "sH": True}

    def test_reactive_mode_recalls_maintenance(self, quality):
        fitted = quality.fit()
        truth = quality.output.truth
        events = [e for e in truth.events if e.kind is TicketKind.MAINTENANCE]
        during_events = [
            t
            for t in quality.output.tickets
            if t.open_ts >= SPLIT
            and any(
                e.fnode_id == t.fnode_id and t.device_id in e.devices and e.start_ts <= t.open_ts < e.end_ts
                for e in events
            )
        ]
        sample = during_events[:: max(1, len(during_events) // 60)]
        predictions = reactive_labels(quality.output.datasets, fitted.hyper, sample)
        recall = maintenance_recall(sample, predictions, truth)

        assert recall is not None
        assert recall >= 0.9


class TestScaling:
    @staticmethod
    def mean_runtime(devices: int, days: int, runs: int = 5) -> float:
        config = SynthConfig(seed=3, n_fnodes=1, devices_per_fnode=devices, duration_days=days, n_channels=1)
        dataset = generate(config).datasets[config.fnode_ids[0]]
        params = hyper(lookback_days=days)
        durations = []
        for _ in range(runs):
            start = time.perf_counter()
            diagnose_fnode(dataset, params, config.end_ts)
            durations.append(time.perf_counter() - start)
        return float(np.mean(durations))

    def test_runtime_is_quadratic_in_devices(self):
        ratio = self.mean_runtime(200, 7) / self.mean_runtime(100, 7)
        assert 3.0 <= ratio <= 5.0

    def test_runtime_is_at_most_linear_in_length(self):
        ratio = self.mean_runtime(100, 14) / self.mean_runtime(100, 7)
        assert 1.0 <= ratio <= 2.6
