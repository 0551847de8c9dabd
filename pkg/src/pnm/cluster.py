"""
Agglomerative clustering over similarity matrices

The merge sequence is recorded once per matrix (Dendrogram) and cut at any
threshold afterwards: replaying merges while their similarity is >= s_f is
exactly the "stop when the best linkage falls below s_f" rule.
"""

from dataclasses import dataclass
from typing import Dict, FrozenSet, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.cluster import DBSCAN

from .features import SimilarityMatrix
from .model import Feature, Linkage


@dataclass(frozen=True)
class Partition:
    """Disjoint clusters covering all devices, in canonical order."""

    clusters: Tuple[FrozenSet[str], ...]
    feature: Optional[Feature] = None

    def __post_init__(self):
        clusters = tuple(sorted((frozenset(c) for c in self.clusters if c), key=lambda c: sorted(c)))
        seen = set()
        for cluster in clusters:
            if seen & cluster:
                raise ValueError("clusters overlap")
            seen |= cluster
        object.__setattr__(self, "clusters", clusters)

    @classmethod
    def from_labels(cls, device_ids: Sequence[str], labels: Sequence[int], feature: Optional[Feature] = None) -> "Partition":
        groups: Dict[int, set] = {}
        for device_id, label in zip(device_ids, labels):
            groups.setdefault(int(label), set()).add(device_id)
        return cls(tuple(frozenset(g) for g in groups.values()), feature)

    @classmethod
    def singletons(cls, device_ids: Iterable[str], feature: Optional[Feature] = None) -> "Partition":
        return cls(tuple(frozenset([d]) for d in device_ids), feature)

    @property
    def devices(self) -> FrozenSet[str]:
        return frozenset().union(*self.clusters) if self.clusters else frozenset()

    def membership(self) -> Dict[str, int]:
        """device_id -> index of its cluster."""
        return {device_id: index for index, cluster in enumerate(self.clusters) for device_id in cluster}

    def cluster_of(self, device_id: str) -> FrozenSet[str]:
        for cluster in self.clusters:
            if device_id in cluster:
                return cluster
        raise KeyError(device_id)

    def labels(self, device_ids: Sequence[str]) -> List[int]:
        membership = self.membership()
        return [membership[device_id] for device_id in device_ids]

    def refines(self, other: "Partition") -> bool:
        """True if every cluster here lies inside one cluster of other."""
        membership = other.membership()
        return all(len({membership[d] for d in cluster}) == 1 for cluster in self.clusters)


@dataclass(frozen=True)
class Dendrogram:
    """
    Merge history: merges[k] = (kept slot, absorbed slot, similarity), where a
    slot is the index of the device that opened the cluster.
    """

    device_ids: Tuple[str, ...]
    merges: Tuple[Tuple[int, int, float], ...]
    feature: Optional[Feature] = None

    def cut(self, s_f: float) -> Partition:
        parent = list(range(len(self.device_ids)))
        for kept, absorbed, similarity in self.merges:
            if similarity < s_f:
                break
            parent[absorbed] = kept

        def root(index: int) -> int:
            while parent[index] != index:
                parent[index] = parent[parent[index]]
                index = parent[index]
            return index

        return Partition.from_labels(self.device_ids, [root(i) for i in range(len(self.device_ids))], self.feature)

    @property
    def similarities(self) -> List[float]:
        return [similarity for _, _, similarity in self.merges]


def build_dendrogram(sim: SimilarityMatrix, linkage: Linkage = Linkage.AVERAGE) -> Dendrogram:
    """
    Record the full agglomeration until every remaining pair of clusters is
    fully undefined.

    Average linkage is the mean over defined member pairs, single the max and
    complete the min; undefined pairs never contribute. Ties go to the merge
    whose union has the lexicographically smallest sorted device-id tuple.
    """
    if linkage is Linkage.DBSCAN:
        raise ValueError("DBSCAN is not an agglomerative linkage; use dbscan_partition")
    n = len(sim.device_ids)
    defined = sim.defined.copy()
    np.fill_diagonal(defined, False)
    values = np.where(defined, sim.values, 0.0)

    totals = values.copy()
    counts = defined.astype(float)
    highs = np.where(defined, sim.values, -np.inf)
    lows = np.where(defined, sim.values, np.inf)
    members: Dict[int, List[str]] = {i: [sim.device_ids[i]] for i in range(n)}
    active = np.ones(n, dtype=bool)
    merges: List[Tuple[int, int, float]] = []
    lower = np.tril_indices(n)

    while active.sum() > 1:
        with np.errstate(invalid="ignore", divide="ignore"):
            if linkage is Linkage.AVERAGE:
                scores = np.where(counts > 0, totals / np.where(counts > 0, counts, 1), -np.inf)
            elif linkage is Linkage.SINGLE:
                scores = highs.copy()
            else:
                scores = np.where(counts > 0, lows, -np.inf)
        scores[~active, :] = -np.inf
        scores[:, ~active] = -np.inf
        scores[lower] = -np.inf
        best = scores.max()
        if not np.isfinite(best):
            break

        candidates = np.argwhere(scores == best)
        a, b = min(
            ((int(i), int(j)) for i, j in candidates),
            key=lambda pair: tuple(sorted(members[pair[0]] + members[pair[1]])),
        )
        merges.append((a, b, float(best)))

        totals[a, :] += totals[b, :]
        totals[:, a] += totals[:, b]
        counts[a, :] += counts[b, :]
        counts[:, a] += counts[:, b]
        highs[a, :] = np.maximum(highs[a, :], highs[b, :])
        highs[:, a] = highs[a, :]
        lows[a, :] = np.minimum(lows[a, :], lows[b, :])
        lows[:, a] = lows[a, :]
        members[a] = members[a] + members.pop(b)
        active[b] = False

    return Dendrogram(tuple(sim.device_ids), tuple(merges), sim.feature)


def agglomerate(sim: SimilarityMatrix, s_f: float, linkage: Linkage = Linkage.AVERAGE) -> Partition:
    return build_dendrogram(sim, linkage).cut(s_f)


def dbscan_partition(sim: SimilarityMatrix, eps: float, min_samples: int) -> Partition:
    """DBSCAN on distance 1 - max(0, sim); undefined pairs sit at distance 1, noise stays singleton."""
    n = len(sim.device_ids)
    if n == 0:
        return Partition((), sim.feature)
    distance = np.where(sim.defined, 1.0 - np.maximum(0.0, sim.values), 1.0)
    np.fill_diagonal(distance, 0.0)
    labels = DBSCAN(eps=eps, min_samples=min_samples, metric="precomputed").fit(distance).labels_
    noise = labels < 0
    labels = labels.copy()
    labels[noise] = labels.max(initial=-1) + 1 + np.arange(noise.sum())
    return Partition.from_labels(sim.device_ids, labels, sim.feature)
