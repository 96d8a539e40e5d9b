"""Eigenvector-guided contrastive learning over NDRE time series."""

__version__ = "0.1.0"

from .data import (
    Dataset,
    NdreSeries,
    SynthConfig,
    compute_ndre,
    load_dataset,
    save_dataset,
    series_from_band_table,
    synthesize,
)

__all__ = [
    "Dataset",
    "NdreSeries",
    "SynthConfig",
    "compute_ndre",
    "load_dataset",
    "save_dataset",
    "series_from_band_table",
    "synthesize",
    "__version__",
]
