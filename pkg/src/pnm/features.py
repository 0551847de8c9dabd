"""
Feature extraction and pairwise similarity

Numeric features (SNR, Tx power) compare aligned points with Pearson
correlation; the missing bitmap compares with one minus the normalized
Hamming distance.
"""

from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import LengthMismatch
from .model import METRICS, ChannelSeries, Feature, FNodeDataset, HyperParams, Preprocessing, TelemetrySeries
from .preprocess import Alignment, EpochGrid, align, index_alignment, missing_bitmap

Window = Tuple[float, float]


def pearson(a: Sequence[float], b: Sequence[float]) -> Optional[float]:
    """Pearson correlation, or None when either vector is constant."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"vectors of length {len(a)} and {len(b)}")
    if len(a) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
        return None
    da = a - a.mean()
    db = b - b.mean()
    r = float(np.dot(da, db) / np.sqrt(np.dot(da, da) * np.dot(db, db)))
    return min(1.0, max(-1.0, r))


def hamming_similarity(a: Sequence[int], b: Sequence[int]) -> float:
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape or not len(a):
        raise LengthMismatch(f"vectors of length {len(a)} and {len(b)}")
    return 1.0 - np.count_nonzero(a != b) / len(a)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    feature: Feature
    device_id: str
    values: np.ndarray


@dataclass(frozen=True, eq=False)
class SimilarityMatrix:
    """Symmetric similarities; entries outside `defined` carry no value."""

    feature: Feature
    device_ids: Tuple[str, ...]
    values: np.ndarray
    defined: np.ndarray

    def __post_init__(self):
        n = len(self.device_ids)
        if self.values.shape != (n, n) or self.defined.shape != (n, n):
            raise ValueError(f"matrix shape does not match {n} devices")
        values = np.where(self.defined, self.values, 0.0)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return len(self.device_ids)

    def get(self, i: int, j: int) -> Optional[float]:
        return float(self.values[i, j]) if self.defined[i, j] else None

    def by_id(self, a: str, b: str) -> Optional[float]:
        return self.get(self.device_ids.index(a), self.device_ids.index(b))

    @classmethod
    def from_dense(cls, feature: Feature, device_ids: Sequence[str], dense: Sequence[Sequence[Optional[float]]]) -> "SimilarityMatrix":
        """Build from a nested list where None marks an undefined pair."""
        n = len(device_ids)
        values = np.zeros((n, n))
        defined = np.zeros((n, n), dtype=bool)
        for i in range(n):
            for j in range(n):
                if dense[i][j] is not None:
                    values[i, j] = dense[i][j]
                    defined[i, j] = True
        return cls(feature, tuple(device_ids), values, defined)


def _channel_pairs(cx: ChannelSeries, cy: ChannelSeries, hyper: HyperParams) -> Alignment:
    if hyper.preprocessing is Preprocessing.RESAMPLE:
        return index_alignment(cx.ts, cy.ts)
    return align(cx.ts, cy.ts, cx.placeholder, cy.placeholder)


def _aligned_values(
    x_channels: Mapping[int, ChannelSeries], y_channels: Mapping[int, ChannelSeries], hyper: HyperParams
) -> Tuple[np.ndarray, np.ndarray]:
    """Metric rows at aligned pairs, channels concatenated in ascending index."""
    xs: List[np.ndarray] = []
    ys: List[np.ndarray] = []
    for index in sorted(set(x_channels) & set(y_channels)):
        cx, cy = x_channels[index], y_channels[index]
        if not len(cx) or not len(cy):
            continue
        pairs = _channel_pairs(cx, cy, hyper)
        xs.append(cx.values[pairs.x_index])
        ys.append(cy.values[pairs.y_index])
    if not xs:
        empty = np.empty((0, len(METRICS)))
        return empty, empty
    return np.concatenate(xs), np.concatenate(ys)


def extract_numeric_pair(
    x: TelemetrySeries,
    y: TelemetrySeries,
    feature: Feature,
    window: Window,
    hyper: HyperParams,
    n_channels: Optional[int] = None,
) -> Optional[Tuple[np.ndarray, np.ndarray]]:
    """Aligned metric vectors of two preprocessed series, or None below the overlap floor."""
    if not feature.is_numeric:
        raise ValueError(f"{feature.value} is not a numeric feature")
    n_channels = n_channels or max(len(x.channels), len(y.channels), 1)
    start, end = window
    vx, vy = _aligned_values(x.window(start, end).channels, y.window(start, end).channels, hyper)
    if len(vx) < hyper.overlap_for(n_channels):
        return None
    column = METRICS.index(feature.metric)
    return vx[:, column], vy[:, column]


def missing_vector(series: TelemetrySeries, grid: EpochGrid, window: Window) -> np.ndarray:
    """0 for every grid epoch in the window where all channels missed, else 1."""
    return missing_bitmap(series, grid)[grid.window_indices(*window)]


def missing_vectors(dataset: FNodeDataset, grid: EpochGrid, window: Window) -> List[FeatureVector]:
    return [
        FeatureVector(Feature.MISSING, device_id, missing_vector(series, grid, window))
        for device_id, series in dataset.devices.items()
    ]


def numeric_similarity(
    dataset: FNodeDataset, features: Iterable[Feature], window: Window, hyper: HyperParams
) -> Dict[Feature, SimilarityMatrix]:
    """
    Pearson matrices for the numeric features, sharing one alignment per
    device pair and channel.
    """
    features = [feature for feature in features if feature.is_numeric]
    device_ids = tuple(dataset.device_ids)
    n = len(device_ids)
    floor = hyper.overlap_for(dataset.n_channels)
    start, end = window
    windowed = [dataset.devices[device_id].window(start, end).channels for device_id in device_ids]

    values = {feature: np.eye(n) for feature in features}
    defined = {feature: np.eye(n, dtype=bool) for feature in features}
    for i in range(n):
        for j in range(i + 1, n):
            vx, vy = _aligned_values(windowed[i], windowed[j], hyper)
            if len(vx) < floor:
                continue
            for feature in features:
                column = METRICS.index(feature.metric)
                r = pearson(vx[:, column], vy[:, column])
                if r is not None:
                    values[feature][i, j] = values[feature][j, i] = r
                    defined[feature][i, j] = defined[feature][j, i] = True
    return {feature: SimilarityMatrix(feature, device_ids, values[feature], defined[feature]) for feature in features}


def hamming_matrix(device_ids: Sequence[str], vectors: np.ndarray) -> SimilarityMatrix:
    """All-pairs Hamming similarity of equal-length binary rows."""
    n = len(device_ids)
    vectors = np.asarray(vectors, dtype=float)
    length = vectors.shape[1] if vectors.ndim == 2 else 0
    if n == 0 or length == 0:
        values = np.ones((n, n))
    else:
        differing = vectors @ (1 - vectors).T + (1 - vectors) @ vectors.T
        values = 1.0 - differing / length
    return SimilarityMatrix(Feature.MISSING, tuple(device_ids), values, np.ones((n, n), dtype=bool))


def similarity_matrix(
    dataset: FNodeDataset, feature: Feature, window: Window, grid: EpochGrid, hyper: HyperParams
) -> SimilarityMatrix:
    if feature is Feature.MISSING:
        vectors = missing_vectors(dataset, grid, window)
        return hamming_matrix([v.device_id for v in vectors], np.array([v.values for v in vectors]))
    return numeric_similarity(dataset, [feature], window, hyper)[feature]
