"""
Preprocessing: epoch detection, missing-point inference, dedup and alignment

Collection epochs are recovered from the fNode-wide timestamp multiset with
DBSCAN; missing points are inferred per channel with a calibrated gap
threshold and rendered as placeholders so that two devices' series can be
paired epoch by epoch with mutual nearest neighbours.
"""

import math
from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from loguru import logger
from sklearn.cluster import DBSCAN

from .errors import InsufficientData
from .model import HOUR, ChannelSeries, EpochParams, FNodeDataset, TelemetrySeries


@dataclass(frozen=True, eq=False)
class EpochGrid:
    """Collection epochs as (start, span) in seconds."""

    starts: np.ndarray
    spans: np.ndarray
    interval_hours: float

    def __post_init__(self):
        starts = np.asarray(self.starts, dtype=float)
        spans = np.asarray(self.spans, dtype=float)
        if starts.shape != spans.shape:
            raise ValueError("starts and spans differ in length")
        if np.any(spans < 0):
            raise ValueError("epoch spans must be non-negative")
        centers = starts + spans / 2
        if np.any(np.diff(centers) <= 0):
            raise ValueError("epoch centers must be strictly increasing")
        object.__setattr__(self, "starts", starts)
        object.__setattr__(self, "spans", spans)

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def centers(self) -> np.ndarray:
        return self.starts + self.spans / 2

    @property
    def ends(self) -> np.ndarray:
        return self.starts + self.spans

    def window_indices(self, start: float, end: float) -> np.ndarray:
        """Epochs whose center lies in (start, end]."""
        centers = self.centers
        lo = np.searchsorted(centers, start, side="right")
        hi = np.searchsorted(centers, end, side="right")
        return np.arange(lo, hi)


@dataclass(frozen=True, eq=False)
class Alignment:
    """Bijective pairing: x_index[k] <-> y_index[k], both strictly increasing."""

    x_index: np.ndarray
    y_index: np.ndarray

    def __len__(self) -> int:
        return len(self.x_index)

    @property
    def pairs(self) -> List[Tuple[int, int]]:
        return list(zip(self.x_index.tolist(), self.y_index.tolist()))

    def swapped(self) -> "Alignment":
        return Alignment(self.y_index, self.x_index)


@dataclass(frozen=True)
class InferenceConfusion:
    """Placeholder bookkeeping against a ground-truth gap count."""

    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    @property
    def accuracy(self) -> float:
        return (self.tp + self.tn) / self.total if self.total else 1.0

    def __add__(self, other: "InferenceConfusion") -> "InferenceConfusion":
        return InferenceConfusion(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)


# --- Epochs ---------------------------------------------------------------


def detect_epochs(timestamps: Iterable[float], eps_hours: float, min_samples: int, interval_hours: float = 4.0) -> EpochGrid:
    """
    DBSCAN over the 1-D timestamp multiset.

    Coincident timestamps are folded into one sample weighted by their
    multiplicity, which leaves the clustering unchanged.
    """
    if eps_hours <= 0 or min_samples < 1:
        raise ValueError("eps must be positive and min_samples at least 1")
    ts = np.asarray(list(timestamps), dtype=float)
    if not len(ts):
        return EpochGrid(np.empty(0), np.empty(0), interval_hours)

    unique, counts = np.unique(ts, return_counts=True)
    labels = DBSCAN(eps=eps_hours * HOUR, min_samples=min_samples).fit(
        unique.reshape(-1, 1), sample_weight=counts
    ).labels_

    clustered = labels >= 0
    if not clustered.any():
        return EpochGrid(np.empty(0), np.empty(0), interval_hours)
    ids = labels[clustered]
    points = unique[clustered]
    n_clusters = ids.max() + 1
    starts = np.full(n_clusters, np.inf)
    ends = np.full(n_clusters, -np.inf)
    np.minimum.at(starts, ids, points)
    np.maximum.at(ends, ids, points)
    order = np.argsort(starts + (ends - starts) / 2, kind="stable")
    return EpochGrid(starts[order], (ends - starts)[order], interval_hours)


def epoch_error(grid: EpochGrid) -> float:
    """Sum over adjacent centers of the gap's distance to the nearest positive multiple of L (hours)."""
    if len(grid) < 2:
        return 0.0
    L = grid.interval_hours
    gaps = np.diff(grid.centers) / HOUR
    multiples = np.maximum(1, np.round(gaps / L))
    return float(np.abs(gaps - multiples * L).sum())


def epoch_search_space(interval_hours: float) -> Tuple[np.ndarray, range]:
    n_eps = int(math.floor(interval_hours / 2 / 0.1 + 1e-9))
    return np.round(np.arange(1, n_eps + 1) * 0.1, 10), range(2, 11)


def calibrate_epoch_params(timestamps: Iterable[float], interval_hours: float) -> EpochParams:
    """
    Grid search for the DBSCAN parameters that minimize epoch_error.

    Candidates are scanned in (eps, min_samples) ascending order and only a
    strictly better error replaces the incumbent. Empty grids are skipped. A
    single-epoch grid scores 0, so it is only taken when no pair yields two or
    more epochs; then the first pair with a non-empty grid wins.
    """
    ts = np.asarray(list(timestamps), dtype=float)
    if len(ts) < 2:
        raise InsufficientData(f"epoch calibration needs at least 2 timestamps, got {len(ts)}")

    eps_values, sample_values = epoch_search_space(interval_hours)
    best: Optional[Tuple[float, float, int]] = None
    single: Optional[Tuple[float, int]] = None
    for eps in eps_values:
        for min_samples in sample_values:
            grid = detect_epochs(ts, float(eps), min_samples, interval_hours)
            if not len(grid):
                continue
            if len(grid) == 1:
                single = single or (float(eps), min_samples)
                continue
            error = epoch_error(grid)
            if best is None or error < best[0] - 1e-9:
                best = (error, float(eps), min_samples)
    if best is None:
        if single is None:
            raise InsufficientData("no parameter pair yields an epoch")
        best = (0.0, *single)

    logger.debug(f"🕒 Epoch params eps={best[1]}h min_samples={best[2]} (error {best[0]:.3f}h)")
    return EpochParams(eps_hours=best[1], min_samples=best[2])


def ground_truth_missing(series: TelemetrySeries, grid: EpochGrid) -> Dict[int, FrozenSet[int]]:
    """Per channel, the epochs with no observed point inside the epoch padded by L/4."""
    pad = grid.interval_hours * HOUR / 4
    result = {}
    for index, channel in series.channels.items():
        ts = channel.ts[~channel.placeholder]
        lo = np.searchsorted(ts, grid.starts - pad, side="left")
        hi = np.searchsorted(ts, grid.ends + pad, side="right")
        result[index] = frozenset(np.flatnonzero(hi == lo).tolist())
    return result


def missing_bitmap(series: TelemetrySeries, grid: EpochGrid) -> np.ndarray:
    """1 per epoch where at least one channel reported, 0 where all channels missed."""
    missing = ground_truth_missing(series, grid)
    present = np.ones(len(grid), dtype=np.int8)
    if missing:
        everywhere = frozenset.intersection(*missing.values())
        present[list(everywhere)] = 0
    else:
        present[:] = 0
    return present


# --- Missing threshold ------------------------------------------------------


def inferred_gap_counts(gaps_hours: np.ndarray, missing_threshold_hours: float, interval_hours: float) -> np.ndarray:
    """Placeholders infer_missing inserts into each gap, in closed form."""
    gaps = np.asarray(gaps_hours, dtype=float)
    counts = np.floor((gaps - missing_threshold_hours) / interval_hours) + 1
    return np.where(gaps >= missing_threshold_hours, counts, 0).astype(int)


def inference_confusion(inferred: np.ndarray, truth: np.ndarray) -> InferenceConfusion:
    """
    Per gap: n = m != 0 -> n TP; n = m = 0 -> TN; n > m -> m TP + (n-m) FN;
    n < m -> n TP + (m-n) FP.
    """
    m = np.asarray(inferred, dtype=int)
    n = np.asarray(truth, dtype=int)
    return InferenceConfusion(
        tp=int(np.minimum(m, n).sum()),
        tn=int(((m == 0) & (n == 0)).sum()),
        fp=int(np.clip(m - n, 0, None).sum()),
        fn=int(np.clip(n - m, 0, None).sum()),
    )


def missing_threshold_candidates(interval_hours: float) -> np.ndarray:
    return interval_hours + np.arange(1, 40) * interval_hours / 40


def grid_gap_truth(dataset: FNodeDataset, grid: EpochGrid) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gaps (hours) between adjacent observed points of every channel, and the
    number of grid epochs each gap skips.
    """
    centers = grid.centers
    gaps, truth = [], []
    for series in dataset.devices.values():
        for channel in series.channels.values():
            ts = channel.ts[~channel.placeholder]
            if len(ts) < 2:
                continue
            nearest = _nearest(centers, ts)
            gaps.append(np.diff(ts) / HOUR)
            truth.append(np.clip(np.diff(nearest) - 1, 0, None))
    if not gaps:
        return np.empty(0), np.empty(0, dtype=int)
    return np.concatenate(gaps), np.concatenate(truth)


def pooled_missing_threshold(samples: Sequence[Tuple[np.ndarray, np.ndarray]], interval_hours: float) -> float:
    """Best threshold over the pooled (gaps, truth) samples of several fNodes."""
    gaps = np.concatenate([g for g, _ in samples]) if samples else np.empty(0)
    truth = np.concatenate([t for _, t in samples]) if samples else np.empty(0, dtype=int)
    if not len(gaps):
        raise InsufficientData("no channel has two or more points")

    best_value, best_accuracy = None, -1.0
    for candidate in missing_threshold_candidates(interval_hours):
        accuracy = inference_confusion(inferred_gap_counts(gaps, candidate, interval_hours), truth).accuracy
        if accuracy > best_accuracy:
            best_value, best_accuracy = float(candidate), accuracy
    logger.debug(f"🕳️ Missing threshold {best_value:.3f}h (acc {best_accuracy:.4f})")
    return best_value


def calibrate_missing_threshold(dataset: FNodeDataset, grid: EpochGrid) -> float:
    if not len(grid):
        raise InsufficientData("epoch grid is empty")
    return pooled_missing_threshold([grid_gap_truth(dataset, grid)], dataset.interval_hours)


# --- Per-channel transforms ------------------------------------------------


def _nearest(reference: np.ndarray, query: np.ndarray) -> np.ndarray:
    """Index of the nearest reference value per query; ties go to the earlier reference."""
    if len(reference) == 1:
        return np.zeros(len(query), dtype=int)
    right = np.clip(np.searchsorted(reference, query, side="left"), 1, len(reference) - 1)
    left = right - 1
    take_left = (query - reference[left]) <= (reference[right] - query)
    return np.where(take_left, left, right)


def dedupe_channel(channel: ChannelSeries, interval_hours: float) -> ChannelSeries:
    observed = channel.observed()
    if len(observed) < 2:
        return observed
    spacing = interval_hours * HOUR / 4
    keep = np.zeros(len(observed), dtype=bool)
    last = -np.inf
    for i, ts in enumerate(observed.ts):
        if ts - last >= spacing:
            keep[i] = True
            last = ts
    return observed.select(keep)


def dedupe(series: TelemetrySeries, interval_hours: float) -> TelemetrySeries:
    """Drop points closer than L/4 to the last kept point, keeping the earliest."""
    return series.map_channels(lambda channel: dedupe_channel(channel, interval_hours))


def infer_missing(timestamps: Sequence[float], missing_threshold_hours: float, interval_hours: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Insert placeholders while the gap from the last output element to the
    next timestamp is at least L_missing; each goes at last + L.

    Returns (timestamps, placeholder mask).
    """
    threshold = missing_threshold_hours * HOUR
    step = interval_hours * HOUR
    out: List[float] = []
    flags: List[bool] = []
    for ts in np.asarray(timestamps, dtype=float):
        while out and ts - out[-1] >= threshold:
            out.append(out[-1] + step)
            flags.append(True)
        out.append(float(ts))
        flags.append(False)
    return np.array(out, dtype=float), np.array(flags, dtype=bool)


def infer_channel(channel: ChannelSeries, missing_threshold_hours: float, interval_hours: float) -> ChannelSeries:
    ts, flags = infer_missing(channel.ts, missing_threshold_hours, interval_hours)
    values = np.full((len(ts), channel.values.shape[1]), np.nan)
    values[~flags] = channel.values
    placeholder = flags.copy()
    placeholder[~flags] = channel.placeholder
    return ChannelSeries(channel.channel, ts, values, placeholder)


def infer_series(series: TelemetrySeries, missing_threshold_hours: float, interval_hours: float) -> TelemetrySeries:
    return series.map_channels(lambda c: infer_channel(c, missing_threshold_hours, interval_hours))


def align(
    tx: np.ndarray,
    ty: np.ndarray,
    x_placeholder: Optional[np.ndarray] = None,
    y_placeholder: Optional[np.ndarray] = None,
) -> Alignment:
    """
    Mutual nearest-neighbour pairing of two timestamp sequences.

    A pair survives only if each side is the other's nearest point; pairs
    touching a placeholder are pruned afterwards.
    """
    tx = np.asarray(tx, dtype=float)
    ty = np.asarray(ty, dtype=float)
    if not len(tx) or not len(ty):
        empty = np.empty(0, dtype=int)
        return Alignment(empty, empty)

    x_to_y = _nearest(ty, tx)
    y_to_x = _nearest(tx, ty)
    xs = np.flatnonzero(y_to_x[x_to_y] == np.arange(len(tx)))
    ys = x_to_y[xs]
    keep = np.ones(len(xs), dtype=bool)
    if x_placeholder is not None:
        keep &= ~np.asarray(x_placeholder, dtype=bool)[xs]
    if y_placeholder is not None:
        keep &= ~np.asarray(y_placeholder, dtype=bool)[ys]
    return Alignment(xs[keep], ys[keep])


def resample_uniform(channel: ChannelSeries, interval_hours: float) -> ChannelSeries:
    """Linear interpolation onto the absolute k*L grid within the observed span."""
    observed = channel.observed()
    if len(observed) < 2:
        raise InsufficientData(f"channel {channel.channel}: resampling needs at least 2 points")
    step = interval_hours * HOUR
    first = math.ceil(round(observed.ts[0] / step, 9))
    last = math.floor(round(observed.ts[-1] / step, 9))
    grid = np.arange(first, last + 1) * step
    values = np.column_stack(
        [np.interp(grid, observed.ts, observed.values[:, column]) for column in range(observed.values.shape[1])]
    ).reshape(len(grid), observed.values.shape[1])
    return ChannelSeries(channel.channel, grid, values, np.zeros(len(grid), dtype=bool))


def resample_series(series: TelemetrySeries, interval_hours: float) -> TelemetrySeries:
    """Resample every channel; channels with fewer than two points become empty."""

    def resample(channel: ChannelSeries) -> ChannelSeries:
        try:
            return resample_uniform(channel, interval_hours)
        except InsufficientData:
            return ChannelSeries.empty(channel.channel)

    return series.map_channels(resample)


def index_alignment(tx: np.ndarray, ty: np.ndarray) -> Alignment:
    """Pairs points sharing an exact timestamp (resampled series)."""
    _, xs, ys = np.intersect1d(tx, ty, assume_unique=True, return_indices=True)
    return Alignment(xs, ys)
