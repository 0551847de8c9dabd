"""
Pipeline orchestrator

One method per CLI command. Every command returns a RunResult; pipeline
errors are logged and turned into the exit code they carry.
"""

from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from loguru import logger

from pnm.diagnose import daily_schedule, reactive_labels, run_batch, run_reactive
from pnm.detect import calibrate_detection
from pnm.errors import InsufficientData, PNMError, UnknownTicket
from pnm.evaluation import (
    labeled_rand_indices,
    maintenance_recall,
    mean_scores,
    missing_inference_confusion,
    normalized_rate_report,
    ticket_statistics,
    window_rand_indices,
)
from pnm.extractor import ingest_ground_truth, ingest_missing_truth, ingest_pnm_csv, ingest_tickets_csv
from pnm.loader import (
    write_cdf_csv,
    write_diagnosis_csv,
    write_ground_truth_csv,
    write_json,
    write_missing_truth_csv,
    write_pnm_csv,
    write_tickets_csv,
)
from pnm.model import FNodeDataset, Label, Ticket
from pnm.preprocess import calibrate_epoch_params, dedupe, detect_epochs, grid_gap_truth, pooled_missing_threshold
from pnm.synth import generate
from pnm.tune import build_training_windows, candidate_mesh, search_threshold

from .config import PipelineConfig

Datasets = Dict[str, FNodeDataset]


@dataclass
class RunResult:
    """Represents the outcome of one command."""

    success: bool
    command: str
    exit_code: int = 0
    records_processed: int = 0
    execution_time: str = "0s"
    outputs: List[str] = field(default_factory=list)
    payload: Dict[str, object] = field(default_factory=dict)
    error_message: Optional[str] = None


@dataclass
class _Step:
    records: int = 0
    outputs: List[Path] = field(default_factory=list)
    payload: Dict[str, object] = field(default_factory=dict)


class PipelineOrchestrator:
    """Runs the commands against one configuration; `config_path` receives calibrated parameters."""

    def __init__(self, config: PipelineConfig, config_path: Optional[Path] = None):
        self.config = config
        self.config_path = Path(config_path) if config_path else None
        logger.debug("🏗️ Pipeline orchestrator initialized")

    # --- Public commands -----------------------------------------------------

    def synth(self) -> RunResult:
        return self._run("synth", self._synth)

    def calibrate(self) -> RunResult:
        return self._run("calibrate", self._calibrate)

    def train(self) -> RunResult:
        return self._run("train", self._train)

    def batch(self) -> RunResult:
        return self._run("batch", self._batch)

    def reactive(self, ticket_id: str) -> RunResult:
        return self._run("reactive", lambda: self._reactive(ticket_id))

    def eval(self) -> RunResult:
        return self._run("eval", self._eval)

    def _run(self, command: str, step: Callable[[], _Step]) -> RunResult:
        start_time = datetime.now()
        logger.info(f"🚀 Running {command}")
        try:
            outcome = step()
        except PNMError as e:
            logger.error(f"❌ {command} failed: {e}")
            return RunResult(
                success=False,
                command=command,
                exit_code=e.exit_code,
                execution_time=str(datetime.now() - start_time),
                error_message=str(e),
            )
        except Exception as e:
            logger.exception(f"💥 Unexpected error in {command}")
            return RunResult(
                success=False,
                command=command,
                exit_code=1,
                execution_time=str(datetime.now() - start_time),
                error_message=str(e),
            )
        execution_time = str(datetime.now() - start_time)
        logger.success(f"✅ {command} completed in {execution_time}")
        return RunResult(
            success=True,
            command=command,
            records_processed=outcome.records,
            execution_time=execution_time,
            outputs=[str(path) for path in outcome.outputs],
            payload=outcome.payload,
        )

    # --- Inputs ---------------------------------------------------------------

    def _path(self, name: str, default: Optional[str] = None) -> Optional[Path]:
        path = self.config.resolve(getattr(self.config.paths, name))
        if path is None and default is not None:
            path = self.config.output_dir / default
        return path

    def _datasets(self) -> Datasets:
        return ingest_pnm_csv(self._path("pnm"), self.config.interval_hours, self.config.n_channels)

    def _tickets(self) -> List[Ticket]:
        return ingest_tickets_csv(self._path("tickets"))

    def _split(self, datasets: Datasets, tickets: Sequence[Ticket]) -> Tuple[Datasets, List[Ticket]]:
        """Training part: everything before split_ts (all data when no split is set)."""
        split = self.config.split_ts
        if split is None:
            return dict(datasets), list(tickets)
        train = {fnode_id: dataset.restrict(end=split) for fnode_id, dataset in datasets.items()}
        return train, [t for t in tickets if t.open_ts < split]

    def _test_tickets(self, tickets: Sequence[Ticket]) -> List[Ticket]:
        split = self.config.split_ts
        return list(tickets) if split is None else [t for t in tickets if t.open_ts >= split]

    @staticmethod
    def _span(datasets: Datasets) -> Tuple[float, float]:
        spans = [dataset.span() for dataset in datasets.values() if dataset.n_points]
        if not spans:
            raise InsufficientData("no telemetry in the selected range")
        return min(s for s, _ in spans), max(e for _, e in spans)

    def _schedule(self, datasets: Datasets, test: bool) -> List[float]:
        first, last = self._span(datasets)
        if test and self.config.split_ts is not None:
            first = max(first, self.config.split_ts)
        return daily_schedule(first, last, self.config.lookback_days)

    def _save_config(self) -> List[Path]:
        if self.config_path is None:
            return []
        return [self.config.save(self.config_path)]

    # --- Commands -------------------------------------------------------------

    def _synth(self) -> _Step:
        synth = self.config.synth_config()
        datasets, tickets, truth = generate(synth, self.config.jobs)
        outputs = [
            write_pnm_csv(datasets, self._path("pnm")),
            write_tickets_csv(tickets, self._path("tickets")),
            write_ground_truth_csv(truth, self._path("ground_truth", "ground_truth.csv")),
            write_missing_truth_csv(truth, self._path("missing_truth", "missing_truth.csv")),
        ]
        n_devices = sum(len(dataset.devices) for dataset in datasets.values())
        logger.info(f"📊 {n_devices:,} devices, {len(tickets):,} tickets, {len(truth.events)} planted faults")
        return _Step(
            records=sum(dataset.n_points for dataset in datasets.values()),
            outputs=outputs,
            payload={"devices": n_devices, "fnodes": len(datasets), "tickets": len(tickets), "events": len(truth.events)},
        )

    def _calibrate_preprocessing(self, train: Datasets) -> None:
        """Per-fNode epoch parameters and one pooled missing threshold."""
        L = self.config.interval_hours
        epoch_params = {}
        samples = []
        for fnode_id in sorted(train):
            clean = train[fnode_id].map_devices(lambda series: dedupe(series, L))
            try:
                params = calibrate_epoch_params(clean.timestamps(), L)
            except InsufficientData as e:
                logger.warning(f"⚠️  {fnode_id}: {e}")
                continue
            epoch_params[fnode_id] = params
            grid = detect_epochs(clean.timestamps(), params.eps_hours, params.min_samples, L)
            samples.append(grid_gap_truth(clean, grid))
        missing_threshold = pooled_missing_threshold(samples, L)
        logger.info(f"🕳️ Missing threshold {missing_threshold:.3f}h over {len(epoch_params)} fNodes")
        self.config.calibrated = self.config.calibrated.model_copy(
            update={"epoch_params": epoch_params, "missing_threshold_hours": missing_threshold}
        )

    def _calibrate(self) -> _Step:
        train, _ = self._split(self._datasets(), [])
        self._calibrate_preprocessing(train)
        calibrated = self.config.calibrated
        return _Step(
            records=len(calibrated.epoch_params),
            outputs=self._save_config(),
            payload={"missing_threshold_hours": calibrated.missing_threshold_hours},
        )

    def _train(self) -> _Step:
        train, tickets = self._split(self._datasets(), self._tickets())
        self._calibrate_preprocessing(train)
        schedule = self._schedule(train, test=False)

        detection = calibrate_detection(
            train,
            tickets,
            schedule,
            lookback_days=self.config.lookback_days,
            anomaly_fraction=self.config.anomaly_fraction,
            min_lift=self.config.min_lift,
        )
        self.config.calibrated = self.config.calibrated.model_copy(update={"detection": detection})

        windows = build_training_windows(train, tickets, self.config.training_hyper(), schedule, self.config.jobs)
        thresholds = {}
        trr: Dict[str, Optional[float]] = {}
        for feature in self.config.features:
            result = search_threshold(
                windows,
                feature,
                self.config.cluster_size_threshold,
                candidate_mesh(feature, self.config.mesh_step),
            )
            thresholds[feature] = result.s_f
            trr[feature.value] = result.trr_value
        self.config.calibrated = self.config.calibrated.model_copy(update={"similarity_thresholds": thresholds})
        return _Step(
            records=len(windows),
            outputs=self._save_config(),
            payload={"similarity_thresholds": {f.value: s for f, s in thresholds.items()}, "trr_m": trr},
        )

    def _batch(self) -> _Step:
        hyper = self.config.hyper_params()
        datasets = self._datasets()
        timeline = run_batch(datasets, hyper, self._schedule(datasets, test=True), self.config.jobs)
        path = write_diagnosis_csv(timeline, self.config.output_dir / "diagnosis.csv")
        counts = {label.value: sum(d.label is label for d in timeline) for label in Label}
        return _Step(records=len(timeline), outputs=[path], payload={"labels": counts})

    def _reactive(self, ticket_id: str) -> _Step:
        hyper = self.config.hyper_params()
        ticket = next((t for t in self._tickets() if t.ticket_id == ticket_id), None)
        if ticket is None:
            raise UnknownTicket(f"ticket {ticket_id} not found")
        label = run_reactive(self._datasets(), hyper, ticket)
        return _Step(records=1, payload={"label": label.value})

    def _eval(self) -> _Step:
        hyper = self.config.hyper_params()
        datasets = self._datasets()
        tickets = self._test_tickets(self._tickets())
        output_dir = self.config.output_dir

        timeline = run_batch(datasets, hyper, self._schedule(datasets, test=True), self.config.jobs)
        rates = normalized_rate_report(timeline, tickets)
        predictions = reactive_labels(datasets, hyper, tickets)
        statistics = ticket_statistics(timeline, tickets, predictions)

        report: Dict[str, object] = {
            "segments": len(timeline),
            "rates": rates.to_dict(),
            "ticket_statistics": statistics.to_dict(),
            "maintenance_recall": maintenance_recall(tickets, predictions),
        }

        truth_path = self._path("ground_truth")
        if truth_path is not None and truth_path.exists():
            truth = ingest_ground_truth(truth_path)
            labeled = labeled_rand_indices(timeline, truth, datasets)
            flagged = mean_scores(window_rand_indices(timeline, truth))
            report.update(mean_scores(labeled))
            report["windows_scored"] = len(labeled)
            report["flagged_ri"] = flagged["ri"]
            report["flagged_ari"] = flagged["ari"]
            report["maintenance_recall"] = maintenance_recall(tickets, predictions, truth)

        missing_path = self._path("missing_truth")
        if missing_path is not None and missing_path.exists():
            origin = self.config.synth.start_ts if self.config.synth is not None else 0.0
            confusion = missing_inference_confusion(
                datasets, ingest_missing_truth(missing_path), origin, hyper.missing_threshold_hours
            )
            report["missing_inference"] = {
                "accuracy": confusion.accuracy,
                "tp": confusion.tp,
                "tn": confusion.tn,
                "fp": confusion.fp,
                "fn": confusion.fn,
            }

        durations = [v for values in statistics.durations.values() for v in values]
        delays = [v for values in statistics.delays.values() for v in values]
        outputs = [
            write_json(report, output_dir / "report.json"),
            write_cdf_csv(durations, output_dir / "cdf_duration.csv"),
            write_cdf_csv(delays, output_dir / "cdf_delay.csv"),
            write_cdf_csv(statistics.fractions, output_dir / "cdf_fraction.csv"),
        ]
        payload = {key: report[key] for key in ("ri", "ari") if key in report}
        payload["invariants_hold"] = rates.all_hold
        return _Step(records=len(timeline), outputs=outputs, payload=payload)
