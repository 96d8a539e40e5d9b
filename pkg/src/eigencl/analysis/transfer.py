"""Apply a frozen encoder, centroids and thresholds to a new dataset."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import encoder as enc
from ..clustering import ClusterModel, ValidityReport, adjusted_rand_index, validity_report
from ..data import Dataset
from ..errors import ConfigError, ContractError, MetricUndefinedError
from .detection import LeadTimeReport, crossing_days, detection_days, lead_time_report
from .staging import StageThresholds, cluster_stages, stage_array


@dataclass(frozen=True, eq=False)
class FrozenPipeline:
    """Everything fitted in-domain: encoder, centroids, thresholds and per-cluster stages."""

    params: enc.EncoderParams
    clusters: ClusterModel
    thresholds: StageThresholds
    cluster_means: np.ndarray

    @property
    def cluster_stage(self) -> np.ndarray:
        return cluster_stages(self.cluster_means, self.thresholds)

    @property
    def stress_set(self) -> set[int]:
        return {j for j, s in enumerate(self.cluster_stage) if s <= 1}


@dataclass(frozen=True, eq=False)
class EvaluationReport:
    labels: np.ndarray
    stages: np.ndarray
    validity: ValidityReport | None
    stage_ari: float | None
    stage_agreement: float
    lead: LeadTimeReport

    def to_dict(self) -> dict:
        return {
            "validity": None if self.validity is None else self.validity.to_dict(),
            "stage_ari": self.stage_ari,
            "stage_agreement": self.stage_agreement,
            "lead_time": self.lead.to_dict(),
            "cluster_sizes": np.bincount(self.labels).tolist(),
        }


def evaluate(frozen: FrozenPipeline, dataset: Dataset) -> EvaluationReport:
    """Embed, assign to the frozen centroids and recompute every metric; no fitting."""
    expected = frozen.params.config.input_dim
    got = enc.feature_dim(dataset.values.shape[1], frozen.params.config.features)
    if got != expected:
        raise ConfigError(f"dataset yields {got} features but the encoder expects {expected}")
    before = frozen.params.fingerprint()
    x = enc.make_features(dataset.values, frozen.params.config.features)
    z = enc.embed(frozen.params, x)
    labels = frozen.clusters.predict(z)
    stages = stage_array(dataset.mean_ndre, frozen.thresholds)
    try:
        validity = validity_report(z, labels)
    except MetricUndefinedError:
        validity = None
    ari = adjusted_rand_index(labels, stages) if len(dataset) >= 2 else None
    agreement = float(np.mean(frozen.cluster_stage[labels] == stages))
    lead = lead_time_report(
        dataset, detection_days(frozen.params, dataset, frozen.clusters, frozen.stress_set), crossing_days(dataset)
    )
    if frozen.params.fingerprint() != before:
        raise ContractError("encoder parameters changed during evaluation")
    return EvaluationReport(labels, stages, validity, ari, agreement, lead)


def transfer_evaluate(frozen: FrozenPipeline, new_dataset: Dataset) -> EvaluationReport:
    return evaluate(frozen, new_dataset)
