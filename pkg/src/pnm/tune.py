"""
Ticketing rates and ticket-guided similarity threshold search

A ticket is captured by the labeled segment of its device whose interval
(start, end] contains its open time. Rates are tickets per device-hour.
"""

import bisect
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .diagnose import Diagnosis, FNodeDiagnoser, Window, WindowState, feature_labels, schedule_segments
from .errors import EmptySpan, EmptyWindow, NoMaintenanceTickets
from .model import HOUR, Feature, FNodeDataset, HyperParams, Label, Ticket, TicketKind


def _ratio(numerator: float, denominator: float) -> Optional[float]:
    return numerator / denominator if denominator > 0 else None


def _normalize(rate: Optional[float], baseline: Optional[float]) -> Optional[float]:
    if rate is None or baseline is None or baseline <= 0:
        return None
    return rate / baseline


@dataclass(frozen=True)
class TicketStats:
    """
    Ticket counts and device-hours per (ticket kind, segment label).

    k_mS reads "maintenance tickets captured by Service segments". Rates are
    None when their time is zero; normalized rates are None when either side
    is undefined or the baseline is zero.
    """

    k_mM: int = 0
    k_mS: int = 0
    k_mH: int = 0
    k_sM: int = 0
    k_sS: int = 0
    k_sH: int = 0
    t_M: float = 0.0
    t_S: float = 0.0
    t_H: float = 0.0
    uncaptured: int = 0

    @property
    def total_hours(self) -> float:
        return self.t_M + self.t_S + self.t_H

    @property
    def n_maintenance(self) -> int:
        return self.k_mM + self.k_mS + self.k_mH

    @property
    def n_service(self) -> int:
        return self.k_sM + self.k_sS + self.k_sH

    @property
    def r_mM(self) -> Optional[float]:
        return _ratio(self.k_mM, self.t_M)

    @property
    def r_mS(self) -> Optional[float]:
        return _ratio(self.k_mS, self.t_S)

    @property
    def r_mH(self) -> Optional[float]:
        return _ratio(self.k_mH, self.t_H)

    @property
    def r_sM(self) -> Optional[float]:
        return _ratio(self.k_sM, self.t_M)

    @property
    def r_sS(self) -> Optional[float]:
        return _ratio(self.k_sS, self.t_S)

    @property
    def r_sH(self) -> Optional[float]:
        return _ratio(self.k_sH, self.t_H)

    @property
    def r_m(self) -> Optional[float]:
        """Maintenance baseline: all maintenance tickets over all device-hours."""
        return _ratio(self.n_maintenance, self.total_hours)

    @property
    def r_s(self) -> Optional[float]:
        return _ratio(self.n_service, self.total_hours)

    def normalized(self) -> Dict[str, Optional[float]]:
        return {
            "mM": _normalize(self.r_mM, self.r_m),
            "mS": _normalize(self.r_mS, self.r_m),
            "mH": _normalize(self.r_mH, self.r_m),
            "sM": _normalize(self.r_sM, self.r_s),
            "sS": _normalize(self.r_sS, self.r_s),
            "sH": _normalize(self.r_sH, self.r_s),
        }

    @property
    def trr_m(self) -> Optional[float]:
        r_mM, r_mS = self.r_mM, self.r_mS
        if r_mM is None or r_mS is None or r_mS == 0:
            return None
        return r_mM / r_mS

    def rank_key(self) -> Tuple[int, float]:
        """Total order for TRR_m: +inf-type above every finite value, fully undefined below."""
        r_mM, r_mS = self.r_mM, self.r_mS
        if r_mS == 0 and r_mM is not None and r_mM > 0:
            return (2, r_mM)
        trr = self.trr_m
        if trr is not None:
            return (1, trr)
        return (0, 0.0)

    def __add__(self, other: "TicketStats") -> "TicketStats":
        return TicketStats(
            *(getattr(self, name) + getattr(other, name) for name in TicketStats.__dataclass_fields__)
        )

    def to_dict(self) -> Dict[str, object]:
        counts = {name: getattr(self, name) for name in TicketStats.__dataclass_fields__}
        rates = {
            name: getattr(self, name)
            for name in ("r_mM", "r_mS", "r_mH", "r_sM", "r_sS", "r_sH", "r_m", "r_s", "trr_m")
        }
        return {**counts, **rates, "normalized": self.normalized()}


def _tally(hours: Mapping[Label, float], maintenance: Mapping[Label, int], service: Mapping[Label, int], uncaptured: int = 0) -> TicketStats:
    return TicketStats(
        k_mM=maintenance.get(Label.MAINTENANCE, 0),
        k_mS=maintenance.get(Label.SERVICE, 0),
        k_mH=maintenance.get(Label.HEALTHY, 0),
        k_sM=service.get(Label.MAINTENANCE, 0),
        k_sS=service.get(Label.SERVICE, 0),
        k_sH=service.get(Label.HEALTHY, 0),
        t_M=hours.get(Label.MAINTENANCE, 0.0),
        t_S=hours.get(Label.SERVICE, 0.0),
        t_H=hours.get(Label.HEALTHY, 0.0),
        uncaptured=uncaptured,
    )


class SegmentIndex:
    """Per-device segments sorted by time, for open_ts lookups."""

    def __init__(self, timeline: Sequence[Diagnosis]):
        self._segments: Dict[Tuple[str, str], List[Diagnosis]] = {}
        for diagnosis in sorted(timeline, key=lambda d: (d.fnode_id, d.device_id, d.start_ts)):
            self._segments.setdefault((diagnosis.fnode_id, diagnosis.device_id), []).append(diagnosis)
        self._ends = {key: [d.end_ts for d in segments] for key, segments in self._segments.items()}

    def find(self, fnode_id: str, device_id: str, ts: float) -> Optional[Diagnosis]:
        key = (fnode_id, device_id)
        if key not in self._segments:
            return None
        index = bisect.bisect_left(self._ends[key], ts)
        if index == len(self._ends[key]):
            return None
        segment = self._segments[key][index]
        return segment if segment.start_ts < ts else None


def segment_label(diagnosis: Diagnosis, feature: Optional[Feature] = None) -> Label:
    if feature is None:
        return diagnosis.label
    return diagnosis.per_feature_labels.get(feature, Label.HEALTHY)


def ticket_stats(timeline: Sequence[Diagnosis], tickets: Sequence[Ticket], feature: Optional[Feature] = None) -> TicketStats:
    """
    Tally tickets against a diagnosis timeline. With `feature`, segments are
    labeled by that feature alone instead of the combined label.
    """
    hours: Dict[Label, float] = {}
    for diagnosis in timeline:
        label = segment_label(diagnosis, feature)
        hours[label] = hours.get(label, 0.0) + diagnosis.duration_hours
    if sum(hours.values()) <= 0:
        raise EmptySpan("diagnosis timeline covers no device-hours")

    index = SegmentIndex(timeline)
    maintenance: Dict[Label, int] = {}
    service: Dict[Label, int] = {}
    uncaptured = 0
    for ticket in tickets:
        segment = index.find(ticket.fnode_id, ticket.device_id, ticket.open_ts)
        if segment is None:
            uncaptured += 1
            continue
        tally = maintenance if ticket.kind is TicketKind.MAINTENANCE else service
        label = segment_label(segment, feature)
        tally[label] = tally.get(label, 0) + 1
    if uncaptured:
        logger.debug(f"🎫 {uncaptured} tickets fall outside the timeline")
    return _tally(hours, maintenance, service, uncaptured)


# --- Grid search ----------------------------------------------------------


@dataclass
class TrainingWindow:
    """One diagnosed training window with its devices' captured ticket counts."""

    state: WindowState
    segment: Window
    maintenance: np.ndarray
    service: np.ndarray

    @property
    def hours(self) -> float:
        return (self.segment[1] - self.segment[0]) / HOUR


@dataclass(frozen=True)
class TuningResult:
    feature: Feature
    s_f: float
    stats: TicketStats
    scores: Tuple[Tuple[float, Optional[float]], ...] = field(default_factory=tuple)

    @property
    def trr_m(self) -> Optional[float]:
        return self.stats.trr_m

    @property
    def trr_value(self) -> Optional[float]:
        """TRR_m with the infinite case as math.inf instead of None."""
        return math.inf if self.stats.rank_key()[0] == 2 else self.stats.trr_m


def _fnode_states(dataset: FNodeDataset, hyper: HyperParams, schedule: Sequence[float]) -> List[Tuple[WindowState, Window]]:
    diagnoser = FNodeDiagnoser(dataset, hyper)
    states = []
    for t, segment in zip(schedule, schedule_segments(schedule, hyper.lookback_seconds)):
        try:
            states.append((diagnoser.window_state(t), segment))
        except EmptyWindow as e:
            logger.warning(f"⚠️  {e}")
    return states


def build_training_windows(
    datasets: Mapping[str, FNodeDataset],
    tickets: Sequence[Ticket],
    hyper: HyperParams,
    schedule: Sequence[float],
    jobs: int = 1,
) -> List[TrainingWindow]:
    """Window states are independent of s_f, so they are built once and cut per candidate."""
    schedule = list(schedule)
    fnode_ids = sorted(datasets)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(
                pool.map(
                    _fnode_states,
                    [datasets[f] for f in fnode_ids],
                    [hyper] * len(fnode_ids),
                    [schedule] * len(fnode_ids),
                )
            )
    else:
        parts = [_fnode_states(datasets[f], hyper, schedule) for f in fnode_ids]

    opened: Dict[Tuple[str, str, TicketKind], List[float]] = {}
    for ticket in tickets:
        opened.setdefault((ticket.fnode_id, ticket.device_id, ticket.kind), []).append(ticket.open_ts)
    opened_sorted = {key: np.sort(np.asarray(values, dtype=float)) for key, values in opened.items()}
    empty = np.empty(0)

    def count(fnode_id: str, device_id: str, kind: TicketKind, segment: Window) -> int:
        ts = opened_sorted.get((fnode_id, device_id, kind), empty)
        return int(np.searchsorted(ts, segment[1], "right") - np.searchsorted(ts, segment[0], "right"))

    windows = []
    for part in parts:
        for state, segment in part:
            windows.append(
                TrainingWindow(
                    state=state,
                    segment=segment,
                    maintenance=np.array(
                        [count(state.fnode_id, d, TicketKind.MAINTENANCE, segment) for d in state.device_ids], dtype=int
                    ),
                    service=np.array(
                        [count(state.fnode_id, d, TicketKind.SERVICE, segment) for d in state.device_ids], dtype=int
                    ),
                )
            )
    logger.info(f"🪟 Built {len(windows)} training windows over {len(fnode_ids)} fNodes")
    return windows


def feature_stats(windows: Sequence[TrainingWindow], feature: Feature, s_f: float, cluster_size_threshold: int) -> TicketStats:
    """TicketStats of the per-feature timeline obtained by cutting every window at s_f."""
    hours: Dict[Label, float] = {}
    maintenance: Dict[Label, int] = {}
    service: Dict[Label, int] = {}
    for window in windows:
        state = window.state
        anomalous = {d: state.anomalies[d].for_feature(feature) for d in state.device_ids}
        labels = feature_labels(state.partition(feature, s_f), anomalous, cluster_size_threshold)
        for index, device_id in enumerate(state.device_ids):
            label = labels[device_id]
            hours[label] = hours.get(label, 0.0) + window.hours
            maintenance[label] = maintenance.get(label, 0) + int(window.maintenance[index])
            service[label] = service.get(label, 0) + int(window.service[index])
    return _tally(hours, maintenance, service)


def candidate_mesh(feature: Feature, mesh_step: float = 0.01) -> np.ndarray:
    """Pearson features search [-1, 1], the Hamming feature [0, 1]."""
    low = 0.0 if feature is Feature.MISSING else -1.0
    count = int(round((1.0 - low) / mesh_step)) + 1
    return np.round(np.linspace(low, 1.0, count), 10)


def search_threshold(
    windows: Sequence[TrainingWindow],
    feature: Feature,
    cluster_size_threshold: int,
    candidates: Sequence[float],
) -> TuningResult:
    """Argmax of TRR_m over candidates; ties go to the larger s_f."""
    if not sum(int(w.maintenance.sum()) for w in windows):
        raise NoMaintenanceTickets("no maintenance ticket falls inside the training windows")
    if not len(candidates):
        raise ValueError("empty candidate mesh")

    best: Optional[Tuple[Tuple[int, float], float, TicketStats]] = None
    scores = []
    for s_f in sorted((float(c) for c in candidates), reverse=True):
        stats = feature_stats(windows, feature, s_f, cluster_size_threshold)
        scores.append((s_f, stats.trr_m))
        key = stats.rank_key()
        if best is None or key > best[0]:
            best = (key, s_f, stats)
    _, s_f, stats = best
    logger.info(f"🎛️  {feature.value}: s_f={s_f:.3f} TRR_m={stats.trr_m}")
    return TuningResult(feature, s_f, stats, tuple(sorted(scores)))


def grid_search_sf(
    datasets: Mapping[str, FNodeDataset],
    tickets: Sequence[Ticket],
    feature: Feature,
    hyper: HyperParams,
    schedule: Sequence[float],
    mesh_step: float = 0.01,
    jobs: int = 1,
    candidates: Optional[Sequence[float]] = None,
) -> TuningResult:
    windows = build_training_windows(datasets, tickets, hyper, schedule, jobs)
    if candidates is None:
        candidates = candidate_mesh(feature, mesh_step)
    return search_threshold(windows, feature, hyper.cluster_size_threshold, candidates)
