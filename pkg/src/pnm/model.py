"""
Domain model for PNM fault diagnosis

Immutable telemetry containers shared by every pipeline stage plus the
pydantic models for the parameters that get persisted into the JSON config.

Timestamps are Unix epoch seconds (float); every interval parameter is
expressed in hours and converted with HOUR.
"""

import math
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

HOUR = 3600.0
DAY = 24 * HOUR


class Metric(str, Enum):
    SNR = "snr"
    TX_POWER = "tx_power"
    RX_POWER = "rx_power"


# Column order of ChannelSeries.values
METRICS: Tuple[Metric, ...] = (Metric.SNR, Metric.TX_POWER, Metric.RX_POWER)


class Feature(str, Enum):
    SNR = "snr"
    TX_POWER = "tx_power"
    MISSING = "missing"

    @property
    def metric(self) -> Optional[Metric]:
        """Metric backing a numeric feature; None for the missing bitmap."""
        if self is Feature.MISSING:
            return None
        return Metric(self.value)

    @property
    def is_numeric(self) -> bool:
        return self is not Feature.MISSING


class TicketKind(str, Enum):
    MAINTENANCE = "maintenance"
    SERVICE = "service"


class Label(str, Enum):
    HEALTHY = "healthy"
    MAINTENANCE = "maintenance"
    SERVICE = "service"


class ReactiveLabel(str, Enum):
    MAINTENANCE = "maintenance"
    SERVICE = "service"
    NO_ISSUE = "no_issue"

    @classmethod
    def from_label(cls, label: Label) -> "ReactiveLabel":
        if label is Label.HEALTHY:
            return cls.NO_ISSUE
        return cls(label.value)


class Direction(str, Enum):
    BELOW = "below"
    ABOVE = "above"


class Linkage(str, Enum):
    AVERAGE = "average"
    SINGLE = "single"
    COMPLETE = "complete"
    DBSCAN = "dbscan"


class Preprocessing(str, Enum):
    ALIGN = "align"
    RESAMPLE = "resample"


def _readonly(values, dtype) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TelemetryPoint:
    """One collection point of one channel. Placeholders carry no metrics."""

    ts: float
    channel: int
    snr: Optional[float]
    tx_power: Optional[float]
    rx_power: Optional[float]
    placeholder: bool = False

    def __post_init__(self):
        if not math.isfinite(self.ts) or self.ts < 0:
            raise ValueError(f"timestamp must be finite and non-negative, got {self.ts}")
        if self.channel < 0:
            raise ValueError(f"channel must be >= 0, got {self.channel}")
        metrics = (self.snr, self.tx_power, self.rx_power)
        if self.placeholder:
            if any(value is not None for value in metrics):
                raise ValueError("placeholder points must not carry metric values")
        elif any(value is None or not math.isfinite(value) for value in metrics):
            raise ValueError("observed points need finite snr, tx_power and rx_power")


@dataclass(frozen=True, eq=False)
class ChannelSeries:
    """
    Time-ordered points of one upstream channel.

    `values` holds one column per metric (METRICS order). Rows flagged in
    `placeholder` have no metric values; they are only reachable through
    `metric()`, which masks them.
    """

    channel: int
    ts: np.ndarray
    values: np.ndarray
    placeholder: np.ndarray

    def __post_init__(self):
        ts = _readonly(self.ts, float)
        placeholder = _readonly(self.placeholder, bool)
        values = np.array(self.values, dtype=float, copy=True).reshape(len(ts), len(METRICS))
        values[placeholder] = np.nan
        values.setflags(write=False)
        if len(placeholder) != len(ts):
            raise ValueError("placeholder mask length differs from timestamps")
        if len(ts) and (not np.all(np.isfinite(ts)) or ts.min() < 0):
            raise ValueError(f"channel {self.channel}: timestamps must be finite and non-negative")
        if np.any(np.diff(ts) < 0):
            raise ValueError(f"channel {self.channel}: timestamps are not sorted")
        if not np.all(np.isfinite(values[~placeholder])):
            raise ValueError(f"channel {self.channel}: non-finite metric on an observed point")
        object.__setattr__(self, "ts", ts)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "placeholder", placeholder)

    @classmethod
    def empty(cls, channel: int) -> "ChannelSeries":
        return cls(channel, np.empty(0), np.empty((0, len(METRICS))), np.empty(0, dtype=bool))

    @classmethod
    def from_points(cls, channel: int, points: Iterable[TelemetryPoint]) -> "ChannelSeries":
        points = sorted(points, key=lambda p: p.ts)
        if any(p.channel != channel for p in points):
            raise ValueError(f"points from another channel passed to channel {channel}")
        ts = [p.ts for p in points]
        values = [
            [np.nan] * len(METRICS) if p.placeholder else [p.snr, p.tx_power, p.rx_power]
            for p in points
        ]
        flags = [p.placeholder for p in points]
        return cls(channel, ts, np.array(values, dtype=float).reshape(-1, len(METRICS)), flags)

    def __len__(self) -> int:
        return len(self.ts)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ChannelSeries):
            return NotImplemented
        return (
            self.channel == other.channel
            and np.array_equal(self.ts, other.ts)
            and np.array_equal(self.placeholder, other.placeholder)
            and np.array_equal(self.values[~self.placeholder], other.values[~other.placeholder])
        )

    def metric(self, metric: Metric) -> np.ma.MaskedArray:
        column = METRICS.index(metric)
        return np.ma.masked_array(self.values[:, column], mask=self.placeholder.copy())

    @property
    def n_observed(self) -> int:
        return int(len(self.ts) - self.placeholder.sum())

    def observed(self) -> "ChannelSeries":
        keep = ~self.placeholder
        return ChannelSeries(self.channel, self.ts[keep], self.values[keep], self.placeholder[keep])

    def select(self, index: np.ndarray) -> "ChannelSeries":
        return ChannelSeries(self.channel, self.ts[index], self.values[index], self.placeholder[index])

    def window(self, start: float, end: float) -> "ChannelSeries":
        """Points with start < ts <= end."""
        lo = np.searchsorted(self.ts, start, side="right")
        hi = np.searchsorted(self.ts, end, side="right")
        return self.select(slice(lo, hi))

    def points(self) -> List[TelemetryPoint]:
        result = []
        for ts, row, flag in zip(self.ts, self.values, self.placeholder):
            if flag:
                result.append(TelemetryPoint(float(ts), self.channel, None, None, None, True))
            else:
                result.append(TelemetryPoint(float(ts), self.channel, *(float(v) for v in row)))
        return result


@dataclass(frozen=True)
class TelemetrySeries:
    """One device's telemetry, channel index -> ChannelSeries."""

    device_id: str
    fnode_id: str
    channels: Mapping[int, ChannelSeries]

    def __post_init__(self):
        ordered = dict(sorted(self.channels.items()))
        for index, channel in ordered.items():
            if channel.channel != index:
                raise ValueError(f"device {self.device_id}: channel key {index} holds channel {channel.channel}")
        object.__setattr__(self, "channels", ordered)

    @property
    def channel_ids(self) -> List[int]:
        return list(self.channels)

    @property
    def n_points(self) -> int:
        return sum(channel.n_observed for channel in self.channels.values())

    def timestamps(self) -> np.ndarray:
        """Observed timestamps of every channel, concatenated."""
        parts = [channel.ts[~channel.placeholder] for channel in self.channels.values()]
        return np.concatenate(parts) if parts else np.empty(0)

    def map_channels(self, func: Callable[[ChannelSeries], ChannelSeries]) -> "TelemetrySeries":
        return TelemetrySeries(
            self.device_id, self.fnode_id, {index: func(channel) for index, channel in self.channels.items()}
        )

    def window(self, start: float, end: float) -> "TelemetrySeries":
        return self.map_channels(lambda channel: channel.window(start, end))

    def has_data(self, start: float, end: float) -> bool:
        return any(channel.window(start, end).n_observed for channel in self.channels.values())


@dataclass(frozen=True)
class FNodeDataset:
    """All devices behind one fiber node."""

    fnode_id: str
    devices: Mapping[str, TelemetrySeries]
    interval_hours: float
    n_channels: int

    def __post_init__(self):
        if self.interval_hours <= 0:
            raise ValueError(f"collection interval must be positive, got {self.interval_hours}")
        if self.n_channels < 1:
            raise ValueError(f"channel count must be >= 1, got {self.n_channels}")
        for device_id, series in self.devices.items():
            if series.fnode_id != self.fnode_id or series.device_id != device_id:
                raise ValueError(f"series {series.device_id}@{series.fnode_id} filed under {device_id}@{self.fnode_id}")
        object.__setattr__(self, "devices", dict(sorted(self.devices.items())))

    @property
    def device_ids(self) -> List[str]:
        return list(self.devices)

    @property
    def interval_seconds(self) -> float:
        return self.interval_hours * HOUR

    @property
    def n_points(self) -> int:
        return sum(series.n_points for series in self.devices.values())

    def timestamps(self) -> np.ndarray:
        parts = [series.timestamps() for series in self.devices.values()]
        return np.concatenate(parts) if parts else np.empty(0)

    def span(self) -> Tuple[float, float]:
        ts = self.timestamps()
        if not len(ts):
            return (0.0, 0.0)
        return (float(ts.min()), float(ts.max()))

    def map_devices(self, func: Callable[[TelemetrySeries], TelemetrySeries]) -> "FNodeDataset":
        return FNodeDataset(
            self.fnode_id,
            {device_id: func(series) for device_id, series in self.devices.items()},
            self.interval_hours,
            self.n_channels,
        )

    def restrict(self, start: Optional[float] = None, end: Optional[float] = None) -> "FNodeDataset":
        """Points with start <= ts < end (either bound optional)."""

        def clip(channel: ChannelSeries) -> ChannelSeries:
            keep = np.ones(len(channel), dtype=bool)
            if start is not None:
                keep &= channel.ts >= start
            if end is not None:
                keep &= channel.ts < end
            return channel.select(keep)

        return self.map_devices(lambda series: series.map_channels(clip))


@dataclass(frozen=True)
class Ticket:
    ticket_id: str
    device_id: str
    fnode_id: str
    open_ts: float
    close_ts: Optional[float]
    kind: TicketKind
    dispatched: bool = False

    def __post_init__(self):
        if self.close_ts is not None and self.close_ts < self.open_ts:
            raise ValueError(f"ticket {self.ticket_id}: close_ts precedes open_ts")


# --- Persisted parameters -------------------------------------------------


class MetricThreshold(BaseModel):
    model_config = ConfigDict(frozen=True)

    metric: Metric
    threshold: float
    direction: Direction
    enabled: bool = True

    def breaches(self, values: np.ndarray) -> np.ndarray:
        if self.direction is Direction.BELOW:
            return values < self.threshold
        return values > self.threshold


class DetectionThresholds(BaseModel):
    model_config = ConfigDict(frozen=True)

    thresholds: Dict[Metric, MetricThreshold] = Field(default_factory=dict)
    anomaly_fraction: float = Field(2 / 3, gt=0, le=1)


class EpochParams(BaseModel):
    model_config = ConfigDict(frozen=True)

    eps_hours: float = Field(gt=0)
    min_samples: int = Field(ge=1)


class HyperParams(BaseModel):
    """Every knob the per-window pipeline needs."""

    model_config = ConfigDict(frozen=True)

    interval_hours: float = Field(4.0, gt=0)
    missing_threshold_hours: float
    similarity_thresholds: Dict[Feature, float]
    cluster_size_threshold: int = Field(5, ge=1)
    lookback_days: float = Field(1.0, gt=0)
    min_overlap: Optional[int] = Field(None, ge=2)
    detection: DetectionThresholds = Field(default_factory=DetectionThresholds)
    epoch_params: Dict[str, EpochParams] = Field(default_factory=dict)
    linkage: Linkage = Linkage.AVERAGE
    preprocessing: Preprocessing = Preprocessing.ALIGN
    features: Tuple[Feature, ...] = tuple(Feature)
    dbscan_eps: float = Field(0.2, gt=0)
    dbscan_min_samples: int = Field(2, ge=1)

    @field_validator("similarity_thresholds")
    @classmethod
    def _thresholds_in_range(cls, value: Dict[Feature, float]) -> Dict[Feature, float]:
        for feature, s_f in value.items():
            if not -1.0 <= s_f <= 1.0:
                raise ValueError(f"s_f for {feature.value} must lie in [-1, 1], got {s_f}")
        return value

    @model_validator(mode="after")
    def _missing_threshold_in_range(self) -> "HyperParams":
        L = self.interval_hours
        if not L < self.missing_threshold_hours < 2 * L:
            raise ValueError(
                f"missing threshold {self.missing_threshold_hours}h must lie strictly between {L}h and {2 * L}h"
            )
        missing = [feature.value for feature in self.features if feature not in self.similarity_thresholds]
        if missing:
            raise ValueError(f"no similarity threshold for features: {missing}")
        return self

    @property
    def anomaly_fraction(self) -> float:
        return self.detection.anomaly_fraction

    @property
    def lookback_seconds(self) -> float:
        return self.lookback_days * DAY

    def overlap_for(self, n_channels: int) -> int:
        """Minimum aligned points o; defaults to a third of the expected window points, plus one."""
        if self.min_overlap is not None:
            return self.min_overlap
        expected = self.lookback_days * 24 / self.interval_hours * n_channels
        return int(math.ceil(round(expected, 9) / 3)) + 1

    def with_updates(self, **updates) -> "HyperParams":
        return self.model_validate({**self.model_dump(), **updates})
