"""
Per-fNode diagnosis pipeline

preprocess -> features -> cluster per feature -> detect -> classify by
cluster size, in batch (a schedule of diagnosis times) and reactive (one
ticket) modes.
"""

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from loguru import logger

from .cluster import Dendrogram, Partition, build_dendrogram, dbscan_partition
from .detect import DeviceAnomaly, device_anomalous, flag_clusters
from .errors import EmptyWindow, UnknownDevice
from .features import hamming_matrix, numeric_similarity
from .model import (
    DAY,
    EpochParams,
    Feature,
    FNodeDataset,
    HyperParams,
    Label,
    Linkage,
    Preprocessing,
    ReactiveLabel,
    Ticket,
)
from .preprocess import EpochGrid, dedupe, detect_epochs, infer_series, missing_bitmap, resample_series

Window = Tuple[float, float]


@dataclass(frozen=True)
class Diagnosis:
    """Label of one device over the timeline segment (start_ts, end_ts]."""

    fnode_id: str
    device_id: str
    start_ts: float
    end_ts: float
    label: Label
    features: FrozenSet[Feature] = frozenset()
    cluster_ids: Mapping[Feature, int] = field(default_factory=dict)
    per_feature_labels: Mapping[Feature, Label] = field(default_factory=dict)

    @property
    def duration_hours(self) -> float:
        return (self.end_ts - self.start_ts) / 3600.0


@dataclass(frozen=True)
class FaultRun:
    """Maximal run of one non-Healthy label on one device."""

    fnode_id: str
    device_id: str
    label: Label
    start_ts: float
    end_ts: float

    @property
    def duration_hours(self) -> float:
        return (self.end_ts - self.start_ts) / 3600.0


@dataclass
class WindowState:
    """Everything about one window that does not depend on s_f."""

    fnode_id: str
    window: Window
    device_ids: Tuple[str, ...]
    anomalies: Dict[str, DeviceAnomaly]
    dendrograms: Dict[Feature, Dendrogram] = field(default_factory=dict)
    partitions: Dict[Feature, Partition] = field(default_factory=dict)

    @property
    def features(self) -> List[Feature]:
        return [f for f in Feature if f in self.dendrograms or f in self.partitions]

    def partition(self, feature: Feature, s_f: float) -> Partition:
        if feature in self.partitions:
            return self.partitions[feature]
        return self.dendrograms[feature].cut(s_f)


def feature_labels(partition: Partition, anomalous: Mapping[str, bool], cluster_size_threshold: int) -> Dict[str, Label]:
    """Flagged clusters of size >= C_thr are maintenance, smaller flagged ones service."""
    labels = {device_id: Label.HEALTHY for cluster in partition.clusters for device_id in cluster}
    for cluster in flag_clusters(partition, anomalous):
        label = Label.MAINTENANCE if len(cluster) >= cluster_size_threshold else Label.SERVICE
        for device_id in cluster:
            labels[device_id] = label
    return labels


def combine_labels(per_feature: Mapping[Feature, Label], anomaly: DeviceAnomaly) -> Label:
    if Label.MAINTENANCE in per_feature.values():
        return Label.MAINTENANCE
    if anomaly.any or Label.SERVICE in per_feature.values():
        return Label.SERVICE
    return Label.HEALTHY


def label_window(
    state: WindowState,
    hyper: HyperParams,
    segment: Optional[Window] = None,
) -> List[Diagnosis]:
    start, end = segment or state.window
    per_feature: Dict[Feature, Dict[str, Label]] = {}
    memberships: Dict[Feature, Dict[str, int]] = {}
    for feature in state.features:
        partition = state.partition(feature, hyper.similarity_thresholds[feature])
        anomalous = {d: state.anomalies[d].for_feature(feature) for d in state.device_ids}
        per_feature[feature] = feature_labels(partition, anomalous, hyper.cluster_size_threshold)
        memberships[feature] = partition.membership()

    diagnoses = []
    for device_id in state.device_ids:
        labels = {feature: per_feature[feature][device_id] for feature in per_feature}
        diagnoses.append(
            Diagnosis(
                fnode_id=state.fnode_id,
                device_id=device_id,
                start_ts=start,
                end_ts=end,
                label=combine_labels(labels, state.anomalies[device_id]),
                features=frozenset(f for f, label in labels.items() if label is not Label.HEALTHY),
                cluster_ids={feature: memberships[feature][device_id] for feature in memberships},
                per_feature_labels=labels,
            )
        )
    return diagnoses


def default_epoch_params(interval_hours: float) -> EpochParams:
    return EpochParams(eps_hours=interval_hours / 8, min_samples=2)


class FNodeDiagnoser:
    """
    Holds the window-independent preprocessing of one fNode: deduped data,
    the epoch grid, filled (placeholder or resampled) series and each
    device's missing bitmap over the whole grid.
    """

    def __init__(self, dataset: FNodeDataset, hyper: HyperParams):
        self.dataset = dataset
        self.hyper = hyper
        L = dataset.interval_hours
        self.clean = dataset.map_devices(lambda series: dedupe(series, L))
        params = hyper.epoch_params.get(dataset.fnode_id, default_epoch_params(L))
        self.grid: EpochGrid = detect_epochs(self.clean.timestamps(), params.eps_hours, params.min_samples, L)
        if hyper.preprocessing is Preprocessing.RESAMPLE:
            self.filled = self.clean.map_devices(lambda series: resample_series(series, L))
        else:
            self.filled = self.clean.map_devices(
                lambda series: infer_series(series, hyper.missing_threshold_hours, L)
            )
        self.presence = {d: missing_bitmap(series, self.grid) for d, series in self.clean.devices.items()}
        logger.debug(f"🧹 {dataset.fnode_id}: {len(dataset.devices)} devices, {len(self.grid)} epochs")

    def window(self, t: float) -> Window:
        return (t - self.hyper.lookback_days * DAY, t)

    def window_state(self, t: float) -> WindowState:
        start, end = self.window(t)
        device_ids = tuple(self.clean.device_ids)
        if not any(self.clean.devices[d].has_data(start, end) for d in device_ids):
            raise EmptyWindow(f"{self.dataset.fnode_id}: no device has data in ({start}, {end}]")

        features = list(self.hyper.features)
        matrices = numeric_similarity(self.filled, features, (start, end), self.hyper)
        epochs = self.grid.window_indices(start, end)
        if Feature.MISSING in features:
            vectors = np.array([self.presence[d][epochs] for d in device_ids]).reshape(len(device_ids), len(epochs))
            matrices[Feature.MISSING] = hamming_matrix(device_ids, vectors)

        anomalies = {
            d: device_anomalous(self.clean.devices[d], (start, end), self.hyper.detection, self.presence[d][epochs])
            for d in device_ids
        }
        state = WindowState(self.dataset.fnode_id, (start, end), device_ids, anomalies)
        for feature in Feature:
            if feature not in matrices:
                continue
            if self.hyper.linkage is Linkage.DBSCAN:
                state.partitions[feature] = dbscan_partition(
                    matrices[feature], self.hyper.dbscan_eps, self.hyper.dbscan_min_samples
                )
            else:
                state.dendrograms[feature] = build_dendrogram(matrices[feature], self.hyper.linkage)
        return state

    def diagnose(self, t: float, segment: Optional[Window] = None) -> List[Diagnosis]:
        return label_window(self.window_state(t), self.hyper, segment)


def diagnose_fnode(dataset: FNodeDataset, hyper: HyperParams, t: float) -> Dict[str, Diagnosis]:
    """Label every device of the fNode over (t - d, t]."""
    return {d.device_id: d for d in FNodeDiagnoser(dataset, hyper).diagnose(t)}


def schedule_segments(schedule: Sequence[float], lookback_seconds: float) -> List[Window]:
    """Timeline segment of each diagnosis time: (max(t - d, previous t), t]."""
    if any(b <= a for a, b in zip(schedule, schedule[1:])):
        raise ValueError("schedule must be strictly increasing")
    segments = []
    previous = -math.inf
    for t in schedule:
        segments.append((max(t - lookback_seconds, previous), t))
        previous = t
    return segments


def daily_schedule(first_ts: float, last_ts: float, lookback_days: float = 1.0) -> List[float]:
    """Diagnosis times on the absolute d-day grid whose windows cover [first_ts, last_ts]."""
    step = lookback_days * DAY
    t = (math.floor(first_ts / step) + 1) * step
    schedule = []
    while t - step < last_ts:
        schedule.append(t)
        t += step
    return schedule


def _batch_fnode(dataset: FNodeDataset, hyper: HyperParams, schedule: Sequence[float]) -> List[Diagnosis]:
    diagnoser = FNodeDiagnoser(dataset, hyper)
    timeline: List[Diagnosis] = []
    for t, segment in zip(schedule, schedule_segments(schedule, hyper.lookback_seconds)):
        try:
            timeline.extend(diagnoser.diagnose(t, segment))
        except EmptyWindow as e:
            logger.warning(f"⚠️  {e}")
    return timeline


def run_batch(
    datasets: Mapping[str, FNodeDataset],
    hyper: HyperParams,
    schedule: Sequence[float],
    jobs: int = 1,
) -> List[Diagnosis]:
    """Diagnose every fNode at each scheduled time; output is sorted by fNode, device, time."""
    schedule = list(schedule)
    fnode_ids = sorted(datasets)
    logger.info(f"📦 Batch diagnosis: {len(fnode_ids)} fNodes x {len(schedule)} windows")
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(
                pool.map(_batch_fnode, [datasets[f] for f in fnode_ids], [hyper] * len(fnode_ids), [schedule] * len(fnode_ids))
            )
    else:
        parts = [_batch_fnode(datasets[f], hyper, schedule) for f in fnode_ids]
    timeline = [diagnosis for part in parts for diagnosis in part]
    timeline.sort(key=lambda d: (d.fnode_id, d.device_id, d.start_ts))
    return timeline


def extract_events(timeline: Sequence[Diagnosis]) -> List[FaultRun]:
    """Maximal runs of contiguous segments sharing one non-Healthy label."""
    runs: List[FaultRun] = []
    current: Optional[FaultRun] = None
    for d in sorted(timeline, key=lambda d: (d.fnode_id, d.device_id, d.start_ts)):
        extends = (
            current is not None
            and current.fnode_id == d.fnode_id
            and current.device_id == d.device_id
            and current.label is d.label
            and current.end_ts == d.start_ts
        )
        if extends:
            current = FaultRun(current.fnode_id, current.device_id, current.label, current.start_ts, d.end_ts)
            continue
        if current is not None:
            runs.append(current)
        current = None
        if d.label is not Label.HEALTHY:
            current = FaultRun(d.fnode_id, d.device_id, d.label, d.start_ts, d.end_ts)
    if current is not None:
        runs.append(current)
    return runs


def run_reactive(datasets: Mapping[str, FNodeDataset], hyper: HyperParams, ticket: Ticket) -> ReactiveLabel:
    """Diagnose the ticket's fNode over the look-back window ending at the ticket's open time."""
    dataset = datasets.get(ticket.fnode_id)
    if dataset is None or ticket.device_id not in dataset.devices:
        raise UnknownDevice(f"device {ticket.device_id} not found on fNode {ticket.fnode_id}")
    diagnosis = diagnose_fnode(dataset, hyper, ticket.open_ts)[ticket.device_id]
    return ReactiveLabel.from_label(diagnosis.label)


def reactive_labels(
    datasets: Mapping[str, FNodeDataset], hyper: HyperParams, tickets: Sequence[Ticket]
) -> Dict[str, ReactiveLabel]:
    """run_reactive for many tickets, preprocessing each fNode once. Unknown devices are skipped."""
    by_fnode: Dict[str, List[Ticket]] = {}
    for ticket in tickets:
        by_fnode.setdefault(ticket.fnode_id, []).append(ticket)
    labels: Dict[str, ReactiveLabel] = {}
    for fnode_id in sorted(by_fnode):
        if fnode_id not in datasets:
            logger.warning(f"⚠️  {len(by_fnode[fnode_id])} tickets on unknown fNode {fnode_id}")
            continue
        diagnoser = FNodeDiagnoser(datasets[fnode_id], hyper)
        for ticket in by_fnode[fnode_id]:
            if ticket.device_id not in diagnoser.dataset.devices:
                continue
            try:
                diagnoses = {d.device_id: d for d in diagnoser.diagnose(ticket.open_ts)}
            except EmptyWindow:
                continue
            labels[ticket.ticket_id] = ReactiveLabel.from_label(diagnoses[ticket.device_id].label)
    return labels
