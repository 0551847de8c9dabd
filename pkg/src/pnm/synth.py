"""
Synthetic fNode generator

Produces telemetry with collection jitter, point loss, duplicates and planted
maintenance/service faults, plus noisy tickets and the exact ground truth.
Every fNode draws from its own RNG stream derived from (seed, fnode_id), so
fNodes can be generated in any order or in parallel with identical output.
"""

import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, List, Mapping, NamedTuple, Optional, Tuple

import numpy as np
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import InvalidConfig
from .model import HOUR, METRICS, ChannelSeries, FNodeDataset, Metric, TelemetrySeries, Ticket, TicketKind


class FaultShape(str, Enum):
    STEP = "step"
    RAMP = "ramp"
    SQUARE = "square"


class FaultPlan(BaseModel):
    model_config = ConfigDict(frozen=True)

    maintenance_per_fnode: int = Field(1, ge=0)
    maintenance_size: Tuple[int, int] = (5, 20)
    service_per_fnode: int = Field(2, ge=0)
    service_size_max: int = Field(1, ge=1, le=2)
    duration_epochs: Tuple[int, int] = (6, 18)
    shapes: Tuple[FaultShape, ...] = tuple(FaultShape)
    amplitude_db: Tuple[float, float] = (6.0, 8.0)
    wobble: float = Field(0.3, ge=0)
    outage_fraction: float = Field(0.2, ge=0, le=1)

    @model_validator(mode="after")
    def _ranges(self) -> "FaultPlan":
        for name in ("maintenance_size", "duration_epochs", "amplitude_db"):
            low, high = getattr(self, name)
            if low > high or low <= 0:
                raise ValueError(f"{name} must be an increasing positive range, got {(low, high)}")
        if not self.shapes:
            raise ValueError("at least one fault shape is required")
        return self


class TicketModel(BaseModel):
    model_config = ConfigDict(frozen=True)

    baseline_rate: float = Field(0.005, ge=0, description="tickets per device-day")
    maintenance_multiplier: float = Field(10.0, ge=0)
    service_multiplier: float = Field(10.0, ge=0)
    baseline_maintenance_fraction: float = Field(0.05, ge=0, le=1)
    mislabel_m_to_s: float = Field(0.09, ge=0, le=1)
    mislabel_s_to_m: float = Field(0.03, ge=0, le=1)
    dispatch_probability: float = Field(0.5, ge=0, le=1)
    repair_hours: float = Field(24.0, gt=0)


class SynthConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    seed: int = 7
    n_fnodes: int = Field(50, ge=1)
    devices_per_fnode: int = Field(100, ge=1)
    duration_days: float = Field(7.0, gt=0)
    interval_hours: float = Field(4.0, gt=0)
    n_channels: int = Field(3, ge=1)
    jitter_hours: float = Field(0.5, ge=0)
    p_loss: float = Field(0.01, ge=0, le=1)
    p_dup: float = Field(0.01, ge=0, le=1)
    dup_offset_hours: float = Field(0.01, gt=0)
    start_ts: float = Field(0.0, ge=0)
    noise_sigma: float = Field(0.5, ge=0)
    device_spread: float = Field(0.25, ge=0, description="std of per-device baselines (dB)")
    channel_spread: float = Field(0.1, ge=0, description="std of per-channel offsets around the device baseline")
    snr_mean: float = 35.0
    tx_mean: float = 45.0
    rx_mean: float = 0.0
    cluster_size_threshold: int = Field(5, ge=1)
    faults: FaultPlan = Field(default_factory=FaultPlan)
    tickets: TicketModel = Field(default_factory=TicketModel)

    @model_validator(mode="after")
    def _consistent(self) -> "SynthConfig":
        if self.jitter_hours >= self.interval_hours / 2:
            raise ValueError("jitter span must be below half the collection interval")
        if self.faults.maintenance_per_fnode and self.faults.maintenance_size[0] < self.cluster_size_threshold:
            raise ValueError("maintenance faults must hit at least cluster_size_threshold devices")
        planted = (
            self.faults.maintenance_per_fnode * self.faults.maintenance_size[1]
            + self.faults.service_per_fnode * self.faults.service_size_max
        )
        if planted > self.devices_per_fnode:
            raise ValueError(f"fault plan may need {planted} devices but an fNode only has {self.devices_per_fnode}")
        return self

    @property
    def n_epochs(self) -> int:
        return int(round(self.duration_days * 24 / self.interval_hours))

    @property
    def end_ts(self) -> float:
        return self.start_ts + self.n_epochs * self.interval_hours * HOUR

    @property
    def fnode_ids(self) -> List[str]:
        return [f"f{index:03d}" for index in range(self.n_fnodes)]

    @classmethod
    def parse(cls, data: Mapping) -> "SynthConfig":
        try:
            return cls.model_validate(data)
        except ValidationError as e:
            raise InvalidConfig(f"invalid synth section: {e}") from e


@dataclass(frozen=True)
class FaultEvent:
    event_id: str
    fnode_id: str
    kind: TicketKind
    start_ts: float
    end_ts: float
    devices: FrozenSet[str]

    def overlaps(self, start: float, end: float) -> bool:
        """True if the event is active somewhere in (start, end]."""
        return self.start_ts <= end and self.end_ts > start


@dataclass(frozen=True)
class GroundTruth:
    """Planted events plus per-(device, channel) dropped epoch indices."""

    events: Tuple[FaultEvent, ...] = ()
    missing: Mapping[Tuple[str, int], FrozenSet[int]] = field(default_factory=dict)

    def events_for(self, fnode_id: str) -> List[FaultEvent]:
        return [event for event in self.events if event.fnode_id == fnode_id]

    def missing_epochs(self, device_id: str, n_channels: int) -> FrozenSet[int]:
        """Epochs in which every channel of the device was dropped."""
        sets = [self.missing.get((device_id, channel), frozenset()) for channel in range(n_channels)]
        return frozenset.intersection(*sets) if sets else frozenset()

    def merge(self, other: "GroundTruth") -> "GroundTruth":
        return GroundTruth(self.events + other.events, {**self.missing, **other.missing})


class SynthOutput(NamedTuple):
    datasets: Dict[str, FNodeDataset]
    tickets: List[Ticket]
    truth: GroundTruth


def fnode_rng(seed: int, fnode_id: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(fnode_id.encode())]))


def fault_profile(shape: FaultShape, n_epochs: int) -> np.ndarray:
    steps = np.arange(n_epochs)
    if shape is FaultShape.STEP:
        return np.ones(n_epochs)
    if shape is FaultShape.RAMP:
        return (steps + 1) / n_epochs
    return np.where((steps // 2) % 2 == 0, 1.0, 0.5)


@dataclass
class _PlannedEvent:
    event: FaultEvent
    first_epoch: int
    offsets: Dict[str, np.ndarray]
    outage: bool


class FNodeGenerator:
    """Generates one fNode; all draws come from the fNode's own stream."""

    def __init__(self, config: SynthConfig, fnode_id: str):
        self.config = config
        self.fnode_id = fnode_id
        self.rng = fnode_rng(config.seed, fnode_id)
        self.device_ids = [f"{fnode_id}-d{index:03d}" for index in range(config.devices_per_fnode)]
        self.interval = config.interval_hours * HOUR

    def epoch_start(self, epoch: int) -> float:
        return self.config.start_ts + epoch * self.interval

    def _plan_events(self) -> List[_PlannedEvent]:
        config, plan, rng = self.config, self.config.faults, self.rng
        available = [str(device_id) for device_id in rng.permutation(self.device_ids)]
        planned: List[_PlannedEvent] = []

        def take(kind: TicketKind, index: int, size: int, shared: bool):
            members = sorted(available.pop() for _ in range(size))
            duration = int(rng.integers(plan.duration_epochs[0], plan.duration_epochs[1] + 1))
            duration = min(duration, config.n_epochs)
            first = int(rng.integers(0, config.n_epochs - duration + 1))
            shape = plan.shapes[int(rng.integers(len(plan.shapes)))]
            amplitude = float(rng.uniform(*plan.amplitude_db))
            outage = bool(rng.random() < plan.outage_fraction)
            profile = fault_profile(shape, duration)
            offsets = {}
            wobble = rng.standard_normal(duration)
            for device_id in members:
                if not shared:
                    wobble = rng.standard_normal(duration)
                offsets[device_id] = amplitude * (profile + plan.wobble * wobble)
            prefix = "m" if kind is TicketKind.MAINTENANCE else "s"
            event = FaultEvent(
                event_id=f"{self.fnode_id}-{prefix}{index}",
                fnode_id=self.fnode_id,
                kind=kind,
                start_ts=self.epoch_start(first),
                end_ts=self.epoch_start(first + duration),
                devices=frozenset(members),
            )
            planned.append(_PlannedEvent(event, first, offsets, outage))

        for index in range(plan.maintenance_per_fnode):
            size = int(rng.integers(plan.maintenance_size[0], plan.maintenance_size[1] + 1))
            take(TicketKind.MAINTENANCE, index, size, shared=True)
        for index in range(plan.service_per_fnode):
            size = int(rng.integers(1, plan.service_size_max + 1))
            take(TicketKind.SERVICE, index, size, shared=False)
        return planned

    def _device_series(
        self, device_id: str, event: Optional[_PlannedEvent]
    ) -> Tuple[TelemetrySeries, Dict[int, FrozenSet[int]]]:
        config, rng = self.config, self.rng
        n_epochs, n_ch = config.n_epochs, config.n_channels
        epochs = np.arange(n_epochs)
        ts = config.start_ts + epochs * self.interval + rng.uniform(0, config.jitter_hours * HOUR, n_epochs)

        means = np.array([config.snr_mean, config.tx_mean, config.rx_mean])
        device_mean = means + rng.normal(0, config.device_spread, len(METRICS))
        offset = np.zeros(n_epochs)
        outage = np.zeros(n_epochs, dtype=bool)
        if event is not None:
            window = slice(event.first_epoch, event.first_epoch + len(event.offsets[device_id]))
            offset[window] = event.offsets[device_id]
            outage[window] = event.outage

        channels: Dict[int, ChannelSeries] = {}
        dropped: Dict[int, FrozenSet[int]] = {}
        for channel in range(n_ch):
            channel_mean = device_mean + rng.normal(0, config.channel_spread, len(METRICS))
            values = channel_mean + rng.normal(0, config.noise_sigma, (n_epochs, len(METRICS)))
            values[:, METRICS.index(Metric.SNR)] -= offset
            values[:, METRICS.index(Metric.TX_POWER)] += offset
            lost = (rng.random(n_epochs) < config.p_loss) | outage
            dup = (rng.random(n_epochs) < config.p_dup) & ~lost
            keep_ts = np.concatenate([ts[~lost], ts[dup] + config.dup_offset_hours * HOUR])
            keep_values = np.concatenate([values[~lost], values[dup]])
            order = np.argsort(keep_ts, kind="stable")
            channels[channel] = ChannelSeries(
                channel, keep_ts[order], keep_values[order], np.zeros(len(order), dtype=bool)
            )
            dropped[channel] = frozenset(int(k) for k in epochs[lost])
        return TelemetrySeries(device_id, self.fnode_id, channels), dropped

    def _tickets(self, events: List[_PlannedEvent]) -> List[Ticket]:
        model, rng = self.config.tickets, self.rng
        span_start, span_end = self.config.start_ts, self.config.end_ts
        rate_per_second = model.baseline_rate / (24 * HOUR)
        fault_of = {device_id: planned.event for planned in events for device_id in planned.event.devices}

        drafts = []
        for device_id in self.device_ids:
            event = fault_of.get(device_id)
            segments = [(span_start, span_end, None)]
            if event is not None:
                segments = [
                    (span_start, event.start_ts, None),
                    (event.start_ts, event.end_ts, event.kind),
                    (event.end_ts, span_end, None),
                ]
            for start, end, kind in segments:
                if end <= start:
                    continue
                multiplier = 1.0
                if kind is TicketKind.MAINTENANCE:
                    multiplier = model.maintenance_multiplier
                elif kind is TicketKind.SERVICE:
                    multiplier = model.service_multiplier
                count = int(rng.poisson(rate_per_second * multiplier * (end - start)))
                for open_ts in np.sort(rng.uniform(start, end, count)):
                    if kind is None:
                        is_maintenance = rng.random() < model.baseline_maintenance_fraction
                        ticket_kind = TicketKind.MAINTENANCE if is_maintenance else TicketKind.SERVICE
                    elif kind is TicketKind.MAINTENANCE:
                        flip = rng.random() < model.mislabel_m_to_s
                        ticket_kind = TicketKind.SERVICE if flip else TicketKind.MAINTENANCE
                    else:
                        flip = rng.random() < model.mislabel_s_to_m
                        ticket_kind = TicketKind.MAINTENANCE if flip else TicketKind.SERVICE
                    close_ts = float(open_ts + rng.exponential(model.repair_hours * HOUR))
                    dispatched = bool(rng.random() < model.dispatch_probability)
                    drafts.append((float(open_ts), device_id, close_ts, ticket_kind, dispatched))

        drafts.sort(key=lambda draft: (draft[0], draft[1]))
        return [
            Ticket(f"{self.fnode_id}-t{index:05d}", device_id, self.fnode_id, open_ts, close_ts, kind, dispatched)
            for index, (open_ts, device_id, close_ts, kind, dispatched) in enumerate(drafts)
        ]

    def generate(self) -> SynthOutput:
        events = self._plan_events()
        event_of = {device_id: planned for planned in events for device_id in planned.event.devices}
        devices: Dict[str, TelemetrySeries] = {}
        missing: Dict[Tuple[str, int], FrozenSet[int]] = {}
        for device_id in self.device_ids:
            series, dropped = self._device_series(device_id, event_of.get(device_id))
            devices[device_id] = series
            for channel, epochs in dropped.items():
                missing[(device_id, channel)] = epochs
        tickets = self._tickets(events)
        dataset = FNodeDataset(self.fnode_id, devices, self.config.interval_hours, self.config.n_channels)
        truth = GroundTruth(tuple(planned.event for planned in events), missing)
        return SynthOutput({self.fnode_id: dataset}, tickets, truth)


def generate_fnode(config: SynthConfig, fnode_id: str) -> SynthOutput:
    return FNodeGenerator(config, fnode_id).generate()


def generate(config: SynthConfig, jobs: int = 1) -> SynthOutput:
    """Generate every fNode of the configuration; output does not depend on jobs."""
    logger.info(
        f"🧪 Generating {config.n_fnodes} fNodes x {config.devices_per_fnode} devices "
        f"over {config.duration_days} days (seed={config.seed})"
    )
    fnode_ids = config.fnode_ids
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(generate_fnode, [config] * len(fnode_ids), fnode_ids))
    else:
        parts = [generate_fnode(config, fnode_id) for fnode_id in fnode_ids]

    datasets: Dict[str, FNodeDataset] = {}
    tickets: List[Ticket] = []
    truth = GroundTruth()
    for part in sorted(parts, key=lambda output: next(iter(output.datasets))):
        datasets.update(part.datasets)
        tickets.extend(part.tickets)
        truth = truth.merge(part.truth)
    tickets.sort(key=lambda ticket: (ticket.open_ts, ticket.ticket_id))

    logger.info(f"✅ Generated {sum(len(d.devices) for d in datasets.values())} devices, "
                f"{len(truth.events)} fault events, {len(tickets)} tickets")
    return SynthOutput(datasets, tickets, truth)
