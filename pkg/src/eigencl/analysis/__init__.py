"""Staging, statistics, early detection, downstream classifiers and transfer evaluation."""

from .classify import (
    ClassMetrics,
    LogRegModel,
    classification_metrics,
    confusion_matrix,
    knn_classify,
    knn_predict,
    logreg_classify,
    logreg_loss,
    logreg_train,
)
from .detection import (
    STRESS_THRESHOLD,
    LeadTimeReport,
    crossing_day,
    crossing_days,
    detection_day,
    detection_days,
    lead_time_report,
    padded_prefixes,
)
from .staging import (
    ClusterProfile,
    StageThresholds,
    cluster_mean_ndre,
    cluster_profiles,
    stage,
    stage_array,
    stress_clusters,
    thresholds_from_centroids,
)
from .stats import StatReport, anova_oneway, cluster_statistics, pooled_t, tukey_hsd
from .transfer import EvaluationReport, FrozenPipeline, evaluate, transfer_evaluate

__all__ = [name for name in dir() if not name.startswith("_")]
