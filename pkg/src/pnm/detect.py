"""
Per-device anomaly detection with ticket-tuned thresholds

A device is anomalous on a metric when at least a fraction phi of its window
points breach the metric's threshold. Thresholds are picked on training data
to maximize tickets per flagged device-hour.
"""

import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Mapping, Optional, Sequence

import numpy as np
from loguru import logger

from .cluster import Partition
from .errors import NoTickets
from .model import (
    HOUR,
    METRICS,
    DetectionThresholds,
    Direction,
    Feature,
    FNodeDataset,
    Metric,
    MetricThreshold,
    TelemetrySeries,
    Ticket,
)


@dataclass(frozen=True)
class DeviceAnomaly:
    snr: bool = False
    tx_power: bool = False
    rx_power: bool = False
    missing: bool = False

    @property
    def any(self) -> bool:
        return self.snr or self.tx_power or self.rx_power or self.missing

    def for_metric(self, metric: Metric) -> bool:
        return getattr(self, metric.value)

    def for_feature(self, feature: Feature) -> bool:
        """SNR -> SNR, TxPower -> Tx power, Missing -> availability."""
        if feature is Feature.MISSING:
            return self.missing
        return self.for_metric(feature.metric)


def required_breaches(n: int, anomaly_fraction: float) -> int:
    return int(math.ceil(anomaly_fraction * n - 1e-9))


def window_rows(series: TelemetrySeries, start: float, end: float) -> np.ndarray:
    """Observed metric rows of every channel in (start, end]."""
    parts = []
    for channel in series.channels.values():
        windowed = channel.window(start, end)
        parts.append(windowed.values[~windowed.placeholder])
    return np.concatenate(parts) if parts else np.empty((0, len(METRICS)))


def window_values(series: TelemetrySeries, start: float, end: float, metric: Metric) -> np.ndarray:
    return window_rows(series, start, end)[:, METRICS.index(metric)]


def device_anomalous(
    series: TelemetrySeries,
    window: Sequence[float],
    thresholds: DetectionThresholds,
    presence: Optional[np.ndarray] = None,
) -> DeviceAnomaly:
    """
    presence is the device's missing-feature vector over the window's grid
    epochs; without it only a window with no data at all counts as missing.
    """
    start, end = window
    phi = thresholds.anomaly_fraction
    flags: Dict[str, bool] = {}
    rows = window_rows(series, start, end)
    for column, metric in enumerate(METRICS):
        rule = thresholds.thresholds.get(metric)
        values = rows[:, column]
        if rule is None or not rule.enabled or not len(values):
            flags[metric.value] = False
            continue
        flags[metric.value] = int(rule.breaches(values).sum()) >= required_breaches(len(values), phi)

    if presence is not None and len(presence):
        absent = int(len(presence) - np.count_nonzero(presence))
        flags["missing"] = absent >= required_breaches(len(presence), phi)
    else:
        flags["missing"] = not series.has_data(start, end)
    return DeviceAnomaly(**flags)


def flag_clusters(partition: Partition, anomalies: Mapping[str, bool]) -> FrozenSet[FrozenSet[str]]:
    """Clusters with at least one anomalous member."""
    return frozenset(cluster for cluster in partition.clusters if any(anomalies.get(d, False) for d in cluster))


@dataclass
class _DeviceWindows:
    """Order statistics and ticket counts per training device-window."""

    below: Dict[Metric, np.ndarray]
    above: Dict[Metric, np.ndarray]
    pooled: Dict[Metric, np.ndarray]
    tickets: np.ndarray
    window_hours: float


def _collect(
    datasets: Mapping[str, FNodeDataset],
    tickets: Sequence[Ticket],
    schedule: Sequence[float],
    lookback_seconds: float,
    anomaly_fraction: float,
) -> _DeviceWindows:
    opened: Dict[tuple, List[float]] = {}
    for ticket in tickets:
        opened.setdefault((ticket.fnode_id, ticket.device_id), []).append(ticket.open_ts)

    below = {metric: [] for metric in METRICS}
    above = {metric: [] for metric in METRICS}
    pooled = {metric: [] for metric in METRICS}
    counts: List[int] = []
    for fnode_id in sorted(datasets):
        for device_id, series in datasets[fnode_id].devices.items():
            open_ts = np.sort(np.asarray(opened.get((fnode_id, device_id), []), dtype=float))
            for t in schedule:
                start = t - lookback_seconds
                counts.append(int(np.searchsorted(open_ts, t, "right") - np.searchsorted(open_ts, start, "right")))
                rows = window_rows(series, start, t)
                for column, metric in enumerate(METRICS):
                    values = np.sort(rows[:, column])
                    if not len(values):
                        below[metric].append(np.nan)
                        above[metric].append(np.nan)
                        continue
                    k = max(1, required_breaches(len(values), anomaly_fraction))
                    below[metric].append(values[k - 1])
                    above[metric].append(values[len(values) - k])
                    pooled[metric].append(values)

    return _DeviceWindows(
        below={m: np.asarray(v, dtype=float) for m, v in below.items()},
        above={m: np.asarray(v, dtype=float) for m, v in above.items()},
        pooled={m: np.concatenate(v) if v else np.empty(0) for m, v in pooled.items()},
        tickets=np.asarray(counts, dtype=float),
        window_hours=lookback_seconds / HOUR,
    )


def calibrate_detection(
    datasets: Mapping[str, FNodeDataset],
    tickets: Sequence[Ticket],
    schedule: Sequence[float],
    lookback_days: float = 1.0,
    anomaly_fraction: float = 2 / 3,
    min_lift: float = 1.5,
    steps: int = 100,
    min_flagged_fraction: float = 0.01,
) -> DetectionThresholds:
    """
    Scan each metric's 1st-99th percentile range in `steps` candidates per
    direction and keep the one with the highest tickets per flagged hour.

    Candidates flagging less than `min_flagged_fraction` of all device-hours
    are ignored. A metric whose best rate is under `min_lift` times the
    overall rate (or with no admissible candidate) gets its least aggressive
    threshold and is disabled.
    """
    lookback_seconds = lookback_days * 24 * HOUR
    windows = _collect(datasets, tickets, schedule, lookback_seconds, anomaly_fraction)
    total_tickets = windows.tickets.sum()
    if total_tickets == 0:
        raise NoTickets("no ticket falls inside the training windows")

    total_hours = len(windows.tickets) * windows.window_hours
    overall = total_tickets / total_hours
    logger.info(f"🎯 Calibrating detection on {len(windows.tickets):,} device-windows, {int(total_tickets)} tickets")

    thresholds: Dict[Metric, MetricThreshold] = {}
    for metric in METRICS:
        values = windows.pooled[metric]
        if not len(values):
            thresholds[metric] = MetricThreshold(metric=metric, threshold=0.0, direction=Direction.BELOW, enabled=False)
            continue
        low, high = np.percentile(values, [1, 99])
        candidates = np.linspace(low, high, steps)

        best = None
        for direction, stats in ((Direction.BELOW, windows.below[metric]), (Direction.ABOVE, windows.above[metric])):
            with np.errstate(invalid="ignore"):
                if direction is Direction.BELOW:
                    flagged = stats[None, :] < candidates[:, None]
                else:
                    flagged = stats[None, :] > candidates[:, None]
            n_flagged = flagged.sum(axis=1)
            captured = flagged.astype(float) @ windows.tickets
            for index, threshold in enumerate(candidates):
                hours = n_flagged[index] * windows.window_hours
                if n_flagged[index] == 0 or hours < min_flagged_fraction * total_hours:
                    continue
                rate = captured[index] / hours
                gentle = -threshold if direction is Direction.BELOW else threshold
                key = (rate, -int(n_flagged[index]), direction is Direction.BELOW, gentle)
                if best is None or key > best[0]:
                    best = (key, float(threshold), direction, rate)

        if best is None or best[3] < min_lift * overall:
            thresholds[metric] = MetricThreshold(
                metric=metric, threshold=float(candidates[0]), direction=Direction.BELOW, enabled=False
            )
            logger.info(f"   ⚪ {metric.value}: no ticket lift, disabled")
            continue
        _, threshold, direction, rate = best
        thresholds[metric] = MetricThreshold(metric=metric, threshold=threshold, direction=direction)
        logger.info(f"   🔴 {metric.value}: {direction.value} {threshold:.2f} (lift {rate / overall:.2f}x)")

    return DetectionThresholds(thresholds=thresholds, anomaly_fraction=anomaly_fraction)
