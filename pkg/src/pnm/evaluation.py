"""
Evaluation metrics

Partition agreement (RI / ARI) against planted faults, both on the
hand-label view of each window and on the flagged fault partition, normalized
ticketing rates with their ordering invariants, incident-level ticket statistics,
reactive-mode confusion and missing-inference accuracy.
"""

import bisect
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from loguru import logger
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from sklearn.metrics import adjusted_rand_score
from sklearn.metrics.cluster import pair_confusion_matrix

from .cluster import Partition
from .diagnose import Diagnosis, extract_events
from .errors import DeviceSetMismatch
from .model import HOUR, Feature, FNodeDataset, Label, ReactiveLabel, Ticket, TicketKind
from .preprocess import InferenceConfusion, dedupe, inference_confusion, inferred_gap_counts
from .synth import FaultEvent, GroundTruth
from .tune import TicketStats, ticket_stats

# --- Rand index -------------------------------------------------------------


@dataclass(frozen=True)
class PairConfusion:
    """Unordered device pairs; positive = same cluster in the prediction."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def rand_index(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 1.0


@dataclass(frozen=True)
class RandIndex:
    ri: float
    ari: float
    confusion: PairConfusion


def rand_index(pred: Partition, truth: Partition) -> RandIndex:
    if pred.devices != truth.devices:
        raise DeviceSetMismatch(
            f"partitions cover different devices ({len(pred.devices)} vs {len(truth.devices)})"
        )
    device_ids = sorted(pred.devices)
    if len(device_ids) < 2:
        return RandIndex(1.0, 1.0, PairConfusion())
    pred_labels = pred.labels(device_ids)
    truth_labels = truth.labels(device_ids)
    # sklearn counts ordered pairs
    matrix = pair_confusion_matrix(truth_labels, pred_labels) // 2
    confusion = PairConfusion(
        tp=int(matrix[1, 1]), tn=int(matrix[0, 0]), fp=int(matrix[0, 1]), fn=int(matrix[1, 0])
    )
    return RandIndex(confusion.rand_index, float(adjusted_rand_score(truth_labels, pred_labels)), confusion)


def _merge_groups(device_ids: Sequence[str], groups: Iterable[FrozenSet[str]]) -> Partition:
    """Union overlapping groups; devices outside every group stay singletons."""
    index = {device_id: i for i, device_id in enumerate(device_ids)}
    rows, cols = [], []
    for group in groups:
        members = sorted(index[d] for d in group if d in index)
        rows.extend(members[:-1])
        cols.extend(members[1:])
    n = len(device_ids)
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, labels = connected_components(graph, directed=False)
    return Partition.from_labels(list(device_ids), labels)


def fault_partition(device_ids: Sequence[str], flagged: Iterable[FrozenSet[str]]) -> Partition:
    return _merge_groups(device_ids, flagged)


def fault_partition_from_diagnoses(diagnoses: Sequence[Diagnosis]) -> Partition:
    """
    Fault partition of one window: the flagged clusters of every feature,
    overlapping ones merged, everything else singleton.
    """
    groups: Dict[Tuple[Feature, int], set] = {}
    for d in diagnoses:
        for feature, cluster_id in d.cluster_ids.items():
            groups.setdefault((feature, cluster_id), set()).add(d.device_id)
    flagged_keys = {
        (feature, d.cluster_ids[feature])
        for d in diagnoses
        for feature in d.features
        if feature in d.cluster_ids
    }
    return fault_partition(
        sorted(d.device_id for d in diagnoses), [frozenset(groups[key]) for key in sorted(flagged_keys)]
    )


def truth_partition(
    truth: GroundTruth, fnode_id: str, device_ids: Sequence[str], window: Tuple[float, float]
) -> Partition:
    """Planted events active in (start, end] grouped, other devices singleton."""
    start, end = window
    groups = [event.devices for event in truth.events_for(fnode_id) if event.overlaps(start, end)]
    return _merge_groups(sorted(device_ids), groups)


def window_rand_indices(timeline: Sequence[Diagnosis], truth: GroundTruth) -> List[Dict[str, object]]:
    """RI / ARI per (fNode, window) of a diagnosis timeline."""
    windows: Dict[Tuple[str, float, float], List[Diagnosis]] = {}
    for d in timeline:
        windows.setdefault((d.fnode_id, d.start_ts, d.end_ts), []).append(d)
    results = []
    for (fnode_id, start, end), diagnoses in sorted(windows.items()):
        pred = fault_partition_from_diagnoses(diagnoses)
        expected = truth_partition(truth, fnode_id, [d.device_id for d in diagnoses], (start, end))
        score = rand_index(pred, expected)
        results.append({"fnode_id": fnode_id, "start_ts": start, "end_ts": end, "ri": score.ri, "ari": score.ari})
    return results


CLUSTERED_FEATURES: Tuple[Feature, ...] = tuple(feature for feature in Feature if feature.is_numeric)


def labeled_partition(
    truth: GroundTruth,
    fnode_id: str,
    window: Tuple[float, float],
    observed: Iterable[str],
    min_coverage: float = 0.5,
) -> Optional[Partition]:
    """
    Hand-label view of one window: members of each maintenance event active
    for at least `min_coverage` of the window form one group and devices of
    overlapping service events are singletons. Devices outside `observed`
    are dropped. None when no maintenance event qualifies.
    """
    start, end = window
    observed = set(observed)
    groups: List[FrozenSet[str]] = []
    service: set = set()
    for event in truth.events_for(fnode_id):
        if not event.overlaps(start, end):
            continue
        if event.kind is TicketKind.SERVICE:
            service |= event.devices & observed
            continue
        covered = min(end, event.end_ts) - max(start, event.start_ts)
        if covered >= min_coverage * (end - start):
            groups.append(event.devices & observed)
    if not groups:
        return None
    grouped = frozenset().union(*groups)
    return _merge_groups(sorted(grouped | (service - grouped)), groups)


def clustering_partition(
    diagnoses: Sequence[Diagnosis], device_ids: Iterable[str], features: Sequence[Feature] = CLUSTERED_FEATURES
) -> Partition:
    """Devices sharing a cluster in any of `features`, joined transitively within `device_ids`."""
    device_ids = sorted(device_ids)
    wanted = set(device_ids)
    groups: Dict[Tuple[Feature, int], set] = {}
    for d in diagnoses:
        if d.device_id not in wanted:
            continue
        for feature in features:
            if feature in d.cluster_ids:
                groups.setdefault((feature, d.cluster_ids[feature]), set()).add(d.device_id)
    return _merge_groups(device_ids, [frozenset(group) for group in groups.values()])


def labeled_rand_indices(
    timeline: Sequence[Diagnosis],
    truth: GroundTruth,
    datasets: Mapping[str, FNodeDataset],
    features: Sequence[Feature] = CLUSTERED_FEATURES,
    min_coverage: float = 0.5,
) -> List[Dict[str, object]]:
    """
    RI / ARI of the clustering on the labeled devices of every window with a
    maintenance event; windows with fewer than two labeled devices are skipped.
    """
    windows: Dict[Tuple[str, float, float], List[Diagnosis]] = {}
    for d in timeline:
        windows.setdefault((d.fnode_id, d.start_ts, d.end_ts), []).append(d)
    results = []
    for (fnode_id, start, end), diagnoses in sorted(windows.items()):
        dataset = datasets.get(fnode_id)
        observed = [
            d.device_id
            for d in diagnoses
            if dataset is None or (d.device_id in dataset.devices and dataset.devices[d.device_id].has_data(start, end))
        ]
        expected = labeled_partition(truth, fnode_id, (start, end), observed, min_coverage)
        if expected is None or len(expected.devices) < 2:
            continue
        pred = clustering_partition(diagnoses, expected.devices, features)
        score = rand_index(pred, expected)
        results.append(
            {
                "fnode_id": fnode_id,
                "start_ts": start,
                "end_ts": end,
                "labeled": len(expected.devices),
                "ri": score.ri,
                "ari": score.ari,
            }
        )
    logger.debug(f"🏷️ Scored {len(results)} labeled windows")
    return results


def mean_scores(scores: Sequence[Mapping[str, object]]) -> Dict[str, Optional[float]]:
    """Average RI / ARI over windows, None for no windows."""
    if not scores:
        return {"ri": None, "ari": None}
    return {key: float(np.mean([s[key] for s in scores])) for key in ("ri", "ari")}


# --- Normalized rates -------------------------------------------------------

INVARIANTS: Tuple[Tuple[str, str, str], ...] = (
    ("mM>sM>1", "mM", "sM"),
    ("mM>mS>1", "mM", "mS"),
    ("sS>mS>1", "sS", "mS"),
    ("sS>sM>1", "sS", "sM"),
)


def _chain(high: Optional[float], low: Optional[float]) -> Optional[bool]:
    if high is None or low is None:
        return None
    return high > low > 1


@dataclass
class RateReport:
    stats: TicketStats
    invariants: Dict[str, Optional[bool]]
    healthy_below_baseline: Dict[str, Optional[bool]]
    per_feature: Dict[Feature, TicketStats] = field(default_factory=dict)

    @property
    def normalized(self) -> Dict[str, Optional[float]]:
        return self.stats.normalized()

    @property
    def all_hold(self) -> bool:
        return all(verdict is True for verdict in self.invariants.values())

    def to_dict(self) -> Dict[str, object]:
        return {
            "combined": self.stats.to_dict(),
            "invariants": self.invariants,
            "healthy_below_baseline": self.healthy_below_baseline,
            "per_feature": {feature.value: stats.to_dict() for feature, stats in self.per_feature.items()},
        }


def normalized_rate_report(timeline: Sequence[Diagnosis], tickets: Sequence[Ticket]) -> RateReport:
    """Undefined rates give a None verdict rather than a silent pass or fail."""
    stats = ticket_stats(timeline, tickets)
    normalized = stats.normalized()
    invariants = {name: _chain(normalized[high], normalized[low]) for name, high, low in INVARIANTS}
    healthy = {
        key: None if normalized[key] is None else normalized[key] < 1 for key in ("mH", "sH")
    }
    features = sorted({f for d in timeline for f in d.per_feature_labels}, key=list(Feature).index)
    per_feature = {feature: ticket_stats(timeline, tickets, feature) for feature in features}
    for name, verdict in invariants.items():
        logger.info(f"   {'✅' if verdict else '❌' if verdict is False else '❔'} {name}")
    return RateReport(stats, invariants, healthy, per_feature)


# --- Incidents and ticket statistics ---------------------------------------


@dataclass(frozen=True)
class Incident:
    fnode_id: str
    label: Label
    devices: FrozenSet[str]
    start_ts: float
    end_ts: float

    @property
    def duration_hours(self) -> float:
        return (self.end_ts - self.start_ts) / HOUR

    @property
    def size(self) -> int:
        return len(self.devices)


def _maintenance_features(d: Diagnosis) -> List[Feature]:
    if d.per_feature_labels:
        return [f for f, label in d.per_feature_labels.items() if label is Label.MAINTENANCE and f in d.cluster_ids]
    return [f for f in d.features if f in d.cluster_ids]


def build_incidents(timeline: Sequence[Diagnosis]) -> List[Incident]:
    """
    Maintenance segments are chained when they share a maintenance cluster in
    the same window or belong to the same device in adjacent segments; each
    connected group is one incident. Service incidents are per-device runs.
    """
    maintenance = sorted(
        (d for d in timeline if d.label is Label.MAINTENANCE),
        key=lambda d: (d.fnode_id, d.device_id, d.start_ts),
    )
    rows: List[int] = []
    cols: List[int] = []
    by_cluster: Dict[tuple, List[int]] = {}
    for i, d in enumerate(maintenance):
        for feature in _maintenance_features(d):
            by_cluster.setdefault((d.fnode_id, d.end_ts, feature, d.cluster_ids[feature]), []).append(i)
        if i and maintenance[i - 1].fnode_id == d.fnode_id and maintenance[i - 1].device_id == d.device_id:
            if maintenance[i - 1].end_ts == d.start_ts:
                rows.append(i - 1)
                cols.append(i)
    for members in by_cluster.values():
        rows.extend(members[:-1])
        cols.extend(members[1:])

    incidents: List[Incident] = []
    n = len(maintenance)
    if n:
        graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        _, labels = connected_components(graph, directed=False)
        for component in range(labels.max() + 1):
            members = [maintenance[i] for i in np.flatnonzero(labels == component)]
            incidents.append(
                Incident(
                    fnode_id=members[0].fnode_id,
                    label=Label.MAINTENANCE,
                    devices=frozenset(d.device_id for d in members),
                    start_ts=min(d.start_ts for d in members),
                    end_ts=max(d.end_ts for d in members),
                )
            )
    for run in extract_events(timeline):
        if run.label is Label.SERVICE:
            incidents.append(Incident(run.fnode_id, run.label, frozenset([run.device_id]), run.start_ts, run.end_ts))
    incidents.sort(key=lambda incident: (incident.fnode_id, incident.start_ts, sorted(incident.devices)))
    return incidents


@dataclass
class TicketStatistics:
    durations: Dict[Label, List[float]]
    delays: Dict[Label, List[float]]
    fractions: List[float]
    no_ticket: Dict[Label, int]
    dispatched: Dict[TicketKind, Optional[float]]
    reactive: Optional[Dict[str, Dict[str, int]]] = None

    def to_dict(self) -> Dict[str, object]:
        return {
            "durations_hours": {label.value: values for label, values in self.durations.items()},
            "delays_hours": {label.value: values for label, values in self.delays.items()},
            "reporting_fractions": self.fractions,
            "no_ticket": {label.value: count for label, count in self.no_ticket.items()},
            "dispatched_fraction": {kind.value: value for kind, value in self.dispatched.items()},
            "reactive_confusion": self.reactive,
        }


class TicketLookup:
    def __init__(self, tickets: Sequence[Ticket]):
        self._opened: Dict[Tuple[str, str], List[float]] = {}
        for ticket in tickets:
            self._opened.setdefault((ticket.fnode_id, ticket.device_id), []).append(ticket.open_ts)
        for values in self._opened.values():
            values.sort()

    def within(self, fnode_id: str, device_id: str, start: float, end: float) -> List[float]:
        """Open times in (start, end]."""
        values = self._opened.get((fnode_id, device_id), [])
        return values[bisect.bisect_right(values, start) : bisect.bisect_right(values, end)]


def reactive_confusion(
    tickets: Sequence[Ticket], predictions: Mapping[str, ReactiveLabel]
) -> Dict[str, Dict[str, int]]:
    """ticket kind -> predicted label -> count, every combination present."""
    kinds = [t.kind.value for t in tickets if t.ticket_id in predictions]
    predicted = [predictions[t.ticket_id].value for t in tickets if t.ticket_id in predictions]
    table = pd.crosstab(
        pd.Series(kinds, name="kind", dtype=object), pd.Series(predicted, name="predicted", dtype=object)
    )
    table = table.reindex(
        index=[k.value for k in TicketKind], columns=[r.value for r in ReactiveLabel], fill_value=0
    )
    return {kind: {label: int(table.loc[kind, label]) for label in table.columns} for kind in table.index}


def maintenance_recall(
    tickets: Sequence[Ticket],
    predictions: Mapping[str, ReactiveLabel],
    truth: Optional[GroundTruth] = None,
) -> Optional[float]:
    """
    Share of maintenance tickets predicted Maintenance, among those whose
    device the reactive mode found anomalous (any prediction but No-issue).

    With ground truth a ticket counts as maintenance when its device is a
    member of a maintenance event active at the open time, whatever kind
    the operator filed it under.
    """
    active: Dict[Tuple[str, str], List[FaultEvent]] = {}
    if truth is not None:
        for event in truth.events:
            if event.kind is TicketKind.MAINTENANCE:
                for device_id in event.devices:
                    active.setdefault((event.fnode_id, device_id), []).append(event)

    hits = total = 0
    for ticket in tickets:
        label = predictions.get(ticket.ticket_id)
        if label is None or label is ReactiveLabel.NO_ISSUE:
            continue
        if truth is None:
            is_maintenance = ticket.kind is TicketKind.MAINTENANCE
        else:
            events = active.get((ticket.fnode_id, ticket.device_id), [])
            is_maintenance = any(e.start_ts <= ticket.open_ts < e.end_ts for e in events)
        if is_maintenance:
            total += 1
            hits += label is ReactiveLabel.MAINTENANCE
    return hits / total if total else None


def ticket_statistics(
    timeline: Sequence[Diagnosis],
    tickets: Sequence[Ticket],
    predictions: Optional[Mapping[str, ReactiveLabel]] = None,
) -> TicketStatistics:
    """
    Per incident: duration, delay from incident start to the first member
    ticket, and (maintenance only) the fraction of members that opened one.
    """
    lookup = TicketLookup(tickets)
    durations: Dict[Label, List[float]] = {Label.MAINTENANCE: [], Label.SERVICE: []}
    delays: Dict[Label, List[float]] = {Label.MAINTENANCE: [], Label.SERVICE: []}
    no_ticket = {Label.MAINTENANCE: 0, Label.SERVICE: 0}
    fractions: List[float] = []
    for incident in build_incidents(timeline):
        durations[incident.label].append(incident.duration_hours)
        opened = {
            device_id: lookup.within(incident.fnode_id, device_id, incident.start_ts, incident.end_ts)
            for device_id in incident.devices
        }
        reporting = [device_id for device_id, times in opened.items() if times]
        if not reporting:
            no_ticket[incident.label] += 1
            continue
        first = min(times[0] for times in opened.values() if times)
        delays[incident.label].append((first - incident.start_ts) / HOUR)
        if incident.label is Label.MAINTENANCE:
            fractions.append(len(reporting) / incident.size)

    dispatched: Dict[TicketKind, Optional[float]] = {}
    for kind in TicketKind:
        flags = [t.dispatched for t in tickets if t.kind is kind]
        dispatched[kind] = sum(flags) / len(flags) if flags else None

    reactive = reactive_confusion(tickets, predictions) if predictions is not None else None
    return TicketStatistics(
        {label: sorted(values) for label, values in durations.items()},
        {label: sorted(values) for label, values in delays.items()},
        sorted(fractions),
        no_ticket,
        dispatched,
        reactive,
    )


def cdf(values: Iterable[float]) -> Tuple[np.ndarray, np.ndarray]:
    """Empirical CDF as (sorted values, cumulative fraction)."""
    ordered = np.sort(np.asarray(list(values), dtype=float))
    if not len(ordered):
        return ordered, ordered
    return ordered, np.arange(1, len(ordered) + 1) / len(ordered)


# --- Missing inference ------------------------------------------------------


def missing_inference_confusion(
    datasets: Mapping[str, FNodeDataset],
    missing_truth: Mapping[Tuple[str, int], FrozenSet[int]],
    origin_ts: float,
    missing_threshold_hours: float,
) -> InferenceConfusion:
    """
    Score the placeholders inferred in every channel gap against the epochs
    the generator actually dropped in it.
    """
    total = InferenceConfusion()
    for dataset in datasets.values():
        L = dataset.interval_hours
        step = L * HOUR
        for device_id, series in dataset.devices.items():
            for index, channel in dedupe(series, L).channels.items():
                if len(channel) < 2:
                    continue
                epochs = np.floor((channel.ts - origin_ts) / step).astype(int)
                dropped = np.asarray(sorted(missing_truth.get((device_id, index), ())), dtype=int)
                truth = np.searchsorted(dropped, epochs[1:], "left") - np.searchsorted(dropped, epochs[:-1], "right")
                inferred = inferred_gap_counts(np.diff(channel.ts) / HOUR, missing_threshold_hours, L)
                total = total + inference_confusion(inferred, truth)
    logger.debug(f"🕳️ Missing inference accuracy {total.accuracy:.4f} over {total.total:,} gaps")
    return total
