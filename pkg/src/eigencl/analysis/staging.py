"""Mean-NDRE stress staging and per-cluster temporal profiles."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..data import REFERENCE_THRESHOLDS, Dataset, Stage
from ..errors import ContractError, ParameterError


@dataclass(frozen=True)
class StageThresholds:
    """Cut points severe/moderate, moderate/mild, mild/healthy; each belongs to the healthier side."""

    cuts: tuple[float, float, float]

    def __post_init__(self):
        cuts = tuple(float(c) for c in self.cuts)
        if len(cuts) != 3:
            raise ParameterError("staging needs exactly three cut points")
        if not all(-1.0 < c < 1.0 for c in cuts) or not cuts[0] < cuts[1] < cuts[2]:
            raise ParameterError(f"cut points must be strictly increasing in (-1, 1), got {cuts}")
        object.__setattr__(self, "cuts", cuts)

    @classmethod
    def reference(cls) -> "StageThresholds":
        return cls(REFERENCE_THRESHOLDS)

    def to_dict(self) -> dict:
        return {"severe_moderate": self.cuts[0], "moderate_mild": self.cuts[1], "mild_healthy": self.cuts[2]}

    @classmethod
    def from_dict(cls, d: dict) -> "StageThresholds":
        return cls((d["severe_moderate"], d["moderate_mild"], d["mild_healthy"]))


def thresholds_from_centroids(cluster_mean_ndre) -> StageThresholds:
    """Midpoints between consecutive sorted cluster-mean NDRE values (exactly four clusters)."""
    means = np.sort(np.asarray(cluster_mean_ndre, dtype=float))
    if means.size != 4:
        raise ContractError(f"staging requires exactly four regimes, got {means.size} clusters")
    if np.any(np.diff(means) <= 0):
        raise ContractError(f"cluster mean NDRE values must be distinct, got {means.tolist()}")
    return StageThresholds(tuple((means[:-1] + means[1:]) / 2.0))


def stage(mean_ndre: float, thresholds: StageThresholds) -> Stage:
    return Stage(int(np.searchsorted(thresholds.cuts, float(mean_ndre), side="right")))


def stage_array(mean_ndre, thresholds: StageThresholds) -> np.ndarray:
    """Vectorized :func:`stage` returning integer stage codes (0 = severe .. 3 = healthy)."""
    return np.searchsorted(thresholds.cuts, np.asarray(mean_ndre, dtype=float), side="right")


def cluster_mean_ndre(dataset: Dataset, labels, k: int | None = None) -> np.ndarray:
    labels = np.asarray(labels)
    k = int(labels.max()) + 1 if k is None else k
    means = np.full(k, np.nan)
    m = dataset.mean_ndre
    for j in range(k):
        members = labels == j
        if members.any():
            means[j] = m[members].mean()
    return means


def cluster_stages(cluster_means, thresholds: StageThresholds) -> np.ndarray:
    return stage_array(cluster_means, thresholds)


def stress_clusters(cluster_means, thresholds: StageThresholds) -> set[int]:
    """Clusters whose mean NDRE stages as Moderate or Severe."""
    stages = cluster_stages(cluster_means, thresholds)
    return {j for j, s in enumerate(stages) if s <= Stage.MODERATE}


@dataclass(frozen=True, eq=False)
class ClusterProfile:
    cluster: int
    n: int
    mean: np.ndarray
    half_width: np.ndarray
    degenerate: bool  # single member: half-width fixed at 0


def cluster_profiles(dataset: Dataset, labels) -> list[ClusterProfile]:
    """Per-date mean with ``1.96 * sd / sqrt(n)`` half-widths for every cluster."""
    labels = np.asarray(labels)
    if labels.shape != (len(dataset),):
        raise ContractError("one label per patch required")
    out = []
    for j in np.unique(labels):
        block = dataset.values[labels == j]
        n = block.shape[0]
        if n == 1:
            hw = np.zeros(block.shape[1])
        else:
            hw = 1.96 * block.std(axis=0, ddof=1) / np.sqrt(n)
        out.append(ClusterProfile(int(j), n, block.mean(axis=0), hw, n == 1))
    return out
