"""NDRE samples, datasets, the synthetic drought-trajectory generator and CSV persistence."""

from __future__ import annotations

import csv
import enum
import io
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DomainError, FormatError, ParameterError, ParseError

DEFAULT_DATES = (0, 15, 30, 45, 60)

# severe/moderate, moderate/mild, mild/healthy cut points in mean NDRE
REFERENCE_THRESHOLDS = (0.3221, 0.4789, 0.5591)


class Stage(enum.IntEnum):
    """Stress stages ordered from most to least severe."""

    SEVERE = 0
    MODERATE = 1
    MILD = 2
    HEALTHY = 3

    @property
    def label(self) -> str:
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "Stage":
        try:
            return cls[text.strip().upper()]
        except KeyError:
            raise ValueError(f"unknown stage {text!r}") from None


# stage_mix order used by SynthConfig
MIX_ORDER = (Stage.HEALTHY, Stage.MILD, Stage.MODERATE, Stage.SEVERE)


def stage_band(stage: Stage, thresholds: Sequence[float] = REFERENCE_THRESHOLDS) -> tuple[float, float]:
    """Half-open ``[lo, hi)`` mean-NDRE band of ``stage``."""
    edges = (-1.0, *thresholds, 1.0 + 1e-12)
    return edges[int(stage)], edges[int(stage) + 1]


def compute_ndre(nir: float, red_edge: float) -> float:
    """Normalized difference red-edge index ``(NIR - RE) / (NIR + RE)``."""
    if nir < 0 or red_edge < 0:
        raise DomainError(f"reflectances must be nonnegative (nir={nir}, red_edge={red_edge})")
    denom = nir + red_edge
    if denom <= 0:
        raise DomainError(f"nir + red_edge must be positive (nir={nir}, red_edge={red_edge})")
    return (nir - red_edge) / denom


def _check_dates(dates: Sequence[int]) -> None:
    if len(dates) == 0:
        raise FormatError("series needs at least one date")
    for a, b in zip(dates, dates[1:]):
        if b <= a:
            raise FormatError(f"dates must be strictly increasing, got {list(dates)}")
    if dates[0] != 0:
        raise FormatError(f"first date offset must be 0, got {dates[0]}")


@dataclass(frozen=True)
class NdreSeries:
    patch_id: str
    values: tuple[float, ...]
    dates: tuple[int, ...] = DEFAULT_DATES

    def __post_init__(self):
        object.__setattr__(self, "values", tuple(float(v) for v in self.values))
        object.__setattr__(self, "dates", tuple(int(d) for d in self.dates))
        if len(self.values) != len(self.dates):
            raise FormatError(
                f"{self.patch_id}: {len(self.values)} values for {len(self.dates)} dates"
            )
        _check_dates(self.dates)
        for v in self.values:
            if not -1.0 <= v <= 1.0:
                raise DomainError(f"{self.patch_id}: NDRE value {v} outside [-1, 1]")

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


def series_from_band_table(rows: Iterable[Sequence[float]], patch_id: str) -> NdreSeries:
    """Build a series from per-date ``(day, nir, red_edge)`` aggregates.

    Days are rebased so the first acquisition is day 0. Values are not normalized.
    """
    rows = [tuple(r) for r in rows]
    if not rows:
        raise FormatError(f"{patch_id}: no rows")
    days = [int(r[0]) for r in rows]
    for a, b in zip(days, days[1:]):
        if b <= a:
            raise FormatError(f"{patch_id}: duplicate or non-monotone dates {days}")
    values = [compute_ndre(r[1], r[2]) for r in rows]
    return NdreSeries(patch_id, values, [d - days[0] for d in days])


@dataclass(frozen=True, eq=False)
class Dataset:
    """A set of equally dated NDRE series stored as an ``N x T`` array.

    ``truth_stage`` / ``truth_onset`` are only present for synthetic corpora and are
    never read by training code.
    """

    patch_ids: tuple[str, ...]
    dates: tuple[int, ...]
    values: np.ndarray
    truth_stage: tuple[Stage, ...] | None = None
    truth_onset: tuple[float | None, ...] | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2:
            raise FormatError("values must be a 2-d array")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "patch_ids", tuple(str(p) for p in self.patch_ids))
        object.__setattr__(self, "dates", tuple(int(d) for d in self.dates))
        n, t = values.shape
        if len(self.patch_ids) != n:
            raise FormatError(f"{len(self.patch_ids)} patch ids for {n} rows")
        if len(set(self.patch_ids)) != n:
            raise FormatError("patch ids must be unique")
        if len(self.dates) != t:
            raise FormatError(f"{len(self.dates)} dates for {t} columns")
        _check_dates(self.dates)
        if not np.all(np.isfinite(values)) or np.any(np.abs(values) > 1.0):
            raise DomainError("NDRE values must lie in [-1, 1]")
        for name in ("truth_stage", "truth_onset"):
            col = getattr(self, name)
            if col is not None:
                if len(col) != n:
                    raise FormatError(f"{name} has {len(col)} entries for {n} rows")
                object.__setattr__(self, name, tuple(col))
        if self.truth_stage is not None:
            object.__setattr__(self, "truth_stage", tuple(Stage(s) for s in self.truth_stage))

    @classmethod
    def from_series(cls, series: Sequence[NdreSeries], **truth) -> "Dataset":
        if not series:
            raise FormatError("dataset needs at least one series")
        dates = series[0].dates
        for s in series:
            if s.dates != dates:
                raise FormatError(f"{s.patch_id}: dates differ from {series[0].patch_id}")
        return cls(tuple(s.patch_id for s in series), dates, np.array([s.values for s in series]), **truth)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.patch_ids == other.patch_ids
            and self.dates == other.dates
            and np.array_equal(self.values, other.values)
            and self.truth_stage == other.truth_stage
            and self.truth_onset == other.truth_onset
        )

    __hash__ = None

    @property
    def series(self) -> list[NdreSeries]:
        return [NdreSeries(p, row, self.dates) for p, row in zip(self.patch_ids, self.values)]

    @property
    def mean_ndre(self) -> np.ndarray:
        return self.values.mean(axis=1)

    @property
    def has_truth(self) -> bool:
        return self.truth_stage is not None

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.flatnonzero(index)
        pick = lambda col: None if col is None else tuple(col[i] for i in index)
        return Dataset(
            tuple(self.patch_ids[i] for i in index),
            self.dates,
            self.values[index],
            pick(self.truth_stage),
            pick(self.truth_onset),
        )


# ---------------------------------------------------------------------------
# synthetic corpora


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the synthetic drought-trajectory generator.

    Every patch starts from a flat level drawn from ``baseline_range``. Stressed
    patches decline linearly from an integer onset day at a per-stage rate drawn from
    ``decline_rate_range`` (keyed mild/moderate/severe), restricted to the rates that
    put the patch's mean NDRE inside its stage band.
    """

    n_patches: int = 2000
    stage_mix: tuple[float, float, float, float] = (0.60, 0.14, 0.14, 0.12)
    noise_sd: float = 0.02
    onset_day_range: tuple[int, int] = (15, 25)
    decline_rate_range: dict = field(
        default_factory=lambda: {
            "mild": (0.005, 0.02),
            "moderate": (0.01, 0.035),
            "severe": (0.02, 0.035),
        }
    )
    baseline_range: tuple[float, float] = (0.68, 0.72)
    dates: tuple[int, ...] = DEFAULT_DATES
    seed: int = 0
    id_prefix: str = "p"

    def __post_init__(self):
        mix = tuple(float(p) for p in self.stage_mix)
        object.__setattr__(self, "stage_mix", mix)
        object.__setattr__(self, "dates", tuple(int(d) for d in self.dates))
        object.__setattr__(self, "onset_day_range", tuple(int(d) for d in self.onset_day_range))
        object.__setattr__(self, "baseline_range", tuple(float(b) for b in self.baseline_range))
        object.__setattr__(
            self,
            "decline_rate_range",
            {k: tuple(float(x) for x in v) for k, v in dict(self.decline_rate_range).items()},
        )
        self.validate()

    def validate(self) -> None:
        if self.n_patches < 1:
            raise ParameterError("n_patches must be >= 1")
        if len(self.stage_mix) != 4 or any(p < 0 for p in self.stage_mix):
            raise ParameterError("stage_mix needs four nonnegative proportions")
        if abs(sum(self.stage_mix) - 1.0) > 1e-9:
            raise ParameterError(f"stage_mix sums to {sum(self.stage_mix)}, expected 1")
        if self.noise_sd < 0:
            raise ParameterError("noise_sd must be >= 0")
        lo, hi = self.onset_day_range
        if lo > hi:
            raise ParameterError("onset_day_range is empty")
        blo, bhi = self.baseline_range
        if not (REFERENCE_THRESHOLDS[2] <= blo <= bhi <= 1.0):
            raise ParameterError("baseline_range must lie inside the healthy band")
        for stage in ("mild", "moderate", "severe"):
            if stage not in self.decline_rate_range:
                raise ParameterError(f"decline_rate_range missing {stage!r}")
            rlo, rhi = self.decline_rate_range[stage]
            if not 0 < rlo <= rhi:
                raise ParameterError(f"bad decline range for {stage}: {(rlo, rhi)}")
        _check_dates(self.dates)

    def to_dict(self) -> dict:
        return {
            "n_patches": self.n_patches,
            "stage_mix": list(self.stage_mix),
            "noise_sd": self.noise_sd,
            "onset_day_range": list(self.onset_day_range),
            "decline_rate_range": {k: list(v) for k, v in self.decline_rate_range.items()},
            "baseline_range": list(self.baseline_range),
            "dates": list(self.dates),
            "seed": self.seed,
            "id_prefix": self.id_prefix,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        for key in ("stage_mix", "onset_day_range", "baseline_range", "dates"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)


def trajectory(base: float, onset: float, rate: float, dates: Sequence[int]) -> np.ndarray:
    """Flat at ``base`` until ``onset``, then linear decline at ``rate`` per day."""
    d = np.asarray(dates, dtype=float)
    return base - rate * np.maximum(0.0, d - onset)


def _stage_counts(n: int, mix: Sequence[float]) -> list[int]:
    # largest-remainder rounding so counts sum to n
    raw = [p * n for p in mix]
    counts = [math.floor(r) for r in raw]
    order = sorted(range(len(mix)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def _stressed_trajectory(rng, stage: Stage, config: SynthConfig) -> tuple[np.ndarray, int]:
    lo_band, hi_band = stage_band(stage)
    pad = 1e-6
    rlo, rhi = config.decline_rate_range[stage.label]
    dates = np.asarray(config.dates, dtype=float)
    for _ in range(1000):
        base = rng.uniform(*config.baseline_range)
        onset = int(rng.integers(config.onset_day_range[0], config.onset_day_range[1] + 1))
        exposure = np.maximum(0.0, dates - onset).mean()
        if exposure <= 0:
            continue
        # mean = base - rate * exposure must land in [lo_band, hi_band)
        feas_lo = max(rlo, (base - hi_band + pad) / exposure)
        feas_hi = min(rhi, (base - lo_band - pad) / exposure)
        if feas_lo > feas_hi:
            continue
        rate = rng.uniform(feas_lo, feas_hi)
        values = trajectory(base, onset, rate, config.dates)
        if values.min() < -1.0:
            continue
        return values, onset
    raise ParameterError(
        f"cannot place a {stage.label} trajectory in its band with the configured "
        "onset/decline/baseline ranges"
    )


def synthesize(config: SynthConfig) -> Dataset:
    """Generate a labeled corpus; a pure function of ``config`` (including its seed)."""
    rng = np.random.default_rng(config.seed)
    counts = _stage_counts(config.n_patches, config.stage_mix)
    stages = np.concatenate([np.full(c, int(s)) for s, c in zip(MIX_ORDER, counts)])
    stages = rng.permutation(stages)

    t = len(config.dates)
    values = np.empty((config.n_patches, t))
    onsets: list[int | None] = []
    for i, s in enumerate(stages):
        stage = Stage(int(s))
        if stage is Stage.HEALTHY:
            values[i] = rng.uniform(*config.baseline_range)
            onsets.append(None)
        else:
            values[i], onset = _stressed_trajectory(rng, stage, config)
            onsets.append(onset)
    if config.noise_sd > 0:
        values = values + rng.normal(0.0, config.noise_sd, size=values.shape)
    clipped = np.clip(values, -1.0, 1.0)
    n_clipped = int(np.count_nonzero(clipped != values))
    if n_clipped:
        warnings.warn(f"synthesize: clipped {n_clipped} NDRE values to [-1, 1]", stacklevel=2)

    width = len(str(config.n_patches - 1))
    ids = tuple(f"{config.id_prefix}{i:0{width}d}" for i in range(config.n_patches))
    return Dataset(
        ids,
        config.dates,
        clipped,
        truth_stage=tuple(Stage(int(s)) for s in stages),
        truth_onset=tuple(onsets),
    )


# ---------------------------------------------------------------------------
# persistence


def _fmt(v: float) -> str:
    # shortest repr that round-trips exactly
    return repr(float(v))


def dataset_to_csv(dataset: Dataset) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["patch_id"] + [f"day_{d}" for d in dataset.dates]
    if dataset.has_truth:
        header += ["truth_stage", "truth_onset_day"]
    writer.writerow(header)
    for i, pid in enumerate(dataset.patch_ids):
        row = [pid] + [_fmt(v) for v in dataset.values[i]]
        if dataset.has_truth:
            onset = dataset.truth_onset[i] if dataset.truth_onset is not None else None
            row += [dataset.truth_stage[i].label, "" if onset is None else _fmt_day(onset)]
        writer.writerow(row)
    return buf.getvalue()


def _fmt_day(day: float) -> str:
    return str(int(day)) if float(day).is_integer() else _fmt(day)


def save_dataset(dataset: Dataset, path) -> None:
    Path(path).write_text(dataset_to_csv(dataset), encoding="utf-8")


def _parse_day_header(name: str, col: int) -> int:
    if not name.startswith("day_"):
        raise ParseError(f"column {col}: expected day_<offset>, got {name!r}", row=1)
    try:
        return int(name[4:])
    except ValueError:
        raise ParseError(f"column {col}: bad day offset in {name!r}", row=1) from None


def dataset_from_csv(text: str) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    rows = [r for r in rows if r]
    if not rows:
        raise ParseError("no records")
    header = [h.strip() for h in rows[0]]
    if not header or header[0] != "patch_id":
        raise ParseError("header must start with patch_id", row=1)
    truth_cols = [h for h in header if h.startswith("truth_")]
    if truth_cols and truth_cols != ["truth_stage", "truth_onset_day"][: len(truth_cols)]:
        raise ParseError(f"unexpected truth columns {truth_cols}", row=1)
    if truth_cols and header[-len(truth_cols):] != truth_cols:
        raise ParseError("truth columns must come last", row=1)
    day_names = header[1 : len(header) - len(truth_cols)]
    if not day_names:
        raise ParseError("no day columns", row=1)
    dates = [_parse_day_header(name, i + 1) for i, name in enumerate(day_names)]
    try:
        _check_dates(dates)
    except FormatError as exc:
        raise ParseError(str(exc), row=1) from None
    if len(rows) == 1:
        raise ParseError("no records")

    t = len(dates)
    ids, values, stages, onsets = [], [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(row)}", row=lineno)
        try:
            vals = [float(x) for x in row[1 : 1 + t]]
        except ValueError as exc:
            raise ParseError(f"bad number: {exc}", row=lineno) from None
        for v in vals:
            if not (-1.0 <= v <= 1.0):
                raise ParseError(f"NDRE value {v} outside [-1, 1]", row=lineno)
        ids.append(row[0])
        values.append(vals)
        if truth_cols:
            try:
                stages.append(Stage.parse(row[1 + t]))
            except ValueError as exc:
                raise ParseError(str(exc), row=lineno) from None
            if len(truth_cols) > 1:
                cell = row[2 + t].strip()
                onsets.append(None if cell == "" else _parse_onset(cell, lineno))
    if len(set(ids)) != len(ids):
        raise ParseError("duplicate patch ids")
    return Dataset(
        tuple(ids),
        tuple(dates),
        np.array(values, dtype=float),
        truth_stage=tuple(stages) if truth_cols else None,
        truth_onset=tuple(onsets) if len(truth_cols) > 1 else None,
    )


def _parse_onset(cell: str, lineno: int):
    try:
        v = float(cell)
    except ValueError:
        raise ParseError(f"bad onset day {cell!r}", row=lineno) from None
    return int(v) if v.is_integer() else v


def load_dataset(path) -> Dataset:
    return dataset_from_csv(Path(path).read_text(encoding="utf-8"))
