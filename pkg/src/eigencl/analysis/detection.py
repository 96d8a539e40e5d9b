"""Threshold crossing days, prefix-embedding detection days and lead-time reports."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import encoder as enc
from ..clustering import ClusterModel, assign
from ..data import Dataset, NdreSeries
from ..errors import ContractError

STRESS_THRESHOLD = 0.40
HIST_BIN_DAYS = 5.0


def crossing_day(series: NdreSeries, threshold: float = STRESS_THRESHOLD) -> float | None:
    """First day the piecewise-linear interpolant of the series reaches ``<= threshold``."""
    return _crossing(np.asarray(series.dates, dtype=float), np.asarray(series.values, dtype=float), threshold)


def _crossing(dates: np.ndarray, values: np.ndarray, threshold: float) -> float | None:
    if values[0] <= threshold:
        return float(dates[0])
    for i in range(len(values) - 1):
        v0, v1 = values[i], values[i + 1]
        if v1 <= threshold:
            return float(dates[i] + (v0 - threshold) / (v0 - v1) * (dates[i + 1] - dates[i]))
    return None


def crossing_days(dataset: Dataset, threshold: float = STRESS_THRESHOLD) -> list[float | None]:
    dates = np.asarray(dataset.dates, dtype=float)
    return [_crossing(dates, row, threshold) for row in dataset.values]


def padded_prefixes(values: np.ndarray) -> np.ndarray:
    """For every row and prefix length t = 2..T, the prefix extended by its last value.

    Returns shape (N, T - 1, T); entry ``[:, t - 2]`` is the length-t prefix.
    """
    values = np.asarray(values, dtype=float)
    n, t = values.shape
    out = np.empty((n, t - 1, t))
    for length in range(2, t + 1):
        out[:, length - 2, :length] = values[:, :length]
        out[:, length - 2, length:] = values[:, length - 1 : length]
    return out


def prefix_assignments(params: enc.EncoderParams, dataset: Dataset, cluster_model: ClusterModel) -> np.ndarray:
    """Nearest-centroid cluster of every padded prefix embedding, shape (N, T - 1)."""
    n, t = dataset.values.shape
    if t < 2:
        raise ContractError("detection needs at least two dates")
    pref = padded_prefixes(dataset.values).reshape(-1, t)
    x = enc.make_features(pref, params.config.features)
    z = enc.embed(params, x)
    return assign(z, cluster_model.centroids)[0].reshape(n, t - 1)


def _persistent_start(flags: np.ndarray) -> int | None:
    # earliest index from which every later flag is set
    if not flags[-1]:
        return None
    idx = len(flags) - 1
    while idx > 0 and flags[idx - 1]:
        idx -= 1
    return idx


def detection_days(params, dataset: Dataset, cluster_model: ClusterModel, stress_set) -> list[float | None]:
    labels = prefix_assignments(params, dataset, cluster_model)
    flags = np.isin(labels, sorted(stress_set))
    out = []
    for row in flags:
        start = _persistent_start(row)
        # prefix index j holds the prefix of length j + 2, observed through dates[j + 1]
        out.append(None if start is None else float(dataset.dates[start + 1]))
    return out


def detection_day(params, series: NdreSeries, cluster_model: ClusterModel, stress_set) -> float | None:
    return detection_days(params, Dataset.from_series([series]), cluster_model, stress_set)[0]


@dataclass(frozen=True)
class LeadTimeReport:
    patch_ids: tuple[str, ...]
    detection_day: tuple[float | None, ...]
    crossing_day: tuple[float | None, ...]
    lead_days: tuple[float | None, ...]
    fraction_early: float | None
    mean_lead_days: float | None
    max_lead_days: float | None
    n_crossing: int
    n_detected: int
    histogram: tuple[tuple[float, float, int], ...]

    @property
    def no_stress_events(self) -> bool:
        return self.n_crossing == 0

    def to_dict(self) -> dict:
        return {
            "fraction_early": self.fraction_early,
            "mean_lead_days": self.mean_lead_days,
            "max_lead_days": self.max_lead_days,
            "n_patches": len(self.patch_ids),
            "n_crossing": self.n_crossing,
            "n_detected": self.n_detected,
            "n_with_lead": sum(v is not None for v in self.lead_days),
            "no_stress_events": self.no_stress_events,
        }

    def histogram_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count"]
        lines += [f"{lo!r},{hi!r},{c}" for lo, hi, c in self.histogram]
        return "\n".join(lines) + "\n"


def lead_histogram(leads, bin_days: float = HIST_BIN_DAYS) -> tuple[tuple[float, float, int], ...]:
    leads = np.asarray([v for v in leads if v is not None], dtype=float)
    if leads.size == 0:
        return ()
    lo = math.floor(leads.min() / bin_days) * bin_days
    hi = math.floor(leads.max() / bin_days) * bin_days + bin_days
    edges = np.arange(lo, hi + bin_days / 2, bin_days)
    counts, _ = np.histogram(leads, bins=edges)
    return tuple((float(a), float(b), int(c)) for a, b, c in zip(edges[:-1], edges[1:], counts))


def lead_time_report(dataset: Dataset, detection, crossing) -> LeadTimeReport:
    detection = list(detection)
    crossing = list(crossing)
    if not len(detection) == len(crossing) == len(dataset):
        raise ContractError("one detection and crossing day per patch required")
    leads = [
        None if d is None or c is None else float(c) - float(d) for d, c in zip(detection, crossing)
    ]
    crossed = [c is not None for c in crossing]
    n_cross = sum(crossed)
    valid = [v for v in leads if v is not None]
    early = sum(1 for v in leads if v is not None and v > 0)
    return LeadTimeReport(
        patch_ids=tuple(dataset.patch_ids),
        detection_day=tuple(None if d is None else float(d) for d in detection),
        crossing_day=tuple(None if c is None else float(c) for c in crossing),
        lead_days=tuple(leads),
        fraction_early=early / n_cross if n_cross else None,
        mean_lead_days=float(np.mean(valid)) if valid else None,
        max_lead_days=float(np.max(valid)) if valid else None,
        n_crossing=n_cross,
        n_detected=sum(d is not None for d in detection),
        histogram=lead_histogram(leads),
    )


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def per_patch_csv(report: LeadTimeReport, stages, clusters) -> str:
    """Rows ``patch_id,stage,cluster,detection_day,crossing_day,lead_days``; absent days are empty."""
    lines = ["patch_id,stage,cluster,detection_day,crossing_day,lead_days"]
    for pid, s, c, d, x, lead in zip(
        report.patch_ids, stages, clusters, report.detection_day, report.crossing_day, report.lead_days
    ):
        lines.append(f"{pid},{s},{int(c)},{_cell(d)},{_cell(x)},{_cell(lead)}")
    return "\n".join(lines) + "\n"
