import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from eigencl.data import (
    REFERENCE_THRESHOLDS,
    Dataset,
    NdreSeries,
    Stage,
    SynthConfig,
    compute_ndre,
    dataset_from_csv,
    dataset_to_csv,
    load_dataset,
    save_dataset,
    series_from_band_table,
    stage_band,
    synthesize,
    trajectory,
)
from eigencl.errors import DomainError, FormatError, ParameterError, ParseError

reflectance = st.floats(min_value=1e-6, max_value=10.0, allow_nan=False)


class TestComputeNdre:
    def test_equal_bands(self):
        assert compute_ndre(0.5, 0.5) == 0.0

    def test_zero_red_edge(self):
        assert compute_ndre(0.5, 0.0) == 1.0

    def test_direct_formula(self):
        assert compute_ndre(0.5, 0.25) == pytest.approx(0.25 / 0.75, abs=1e-15)
        assert compute_ndre(0.5, 0.25) == pytest.approx(0.333333333, abs=1e-9)

    def test_zero_denominator_names_both_bands(self):
        with pytest.raises(DomainError, match="nir.*red_edge"):
            compute_ndre(0.0, 0.0)

    def test_negative_reflectance(self):
        with pytest.raises(DomainError):
            compute_ndre(-0.1, 0.3)

    @given(reflectance, reflectance)
    def test_antisymmetric(self, a, b):
        assert compute_ndre(a, b) == pytest.approx(-compute_ndre(b, a), abs=1e-12)

    @given(reflectance, reflectance, st.floats(min_value=1e-3, max_value=1e3))
    def test_scale_invariant(self, a, b, c):
        assert compute_ndre(c * a, c * b) == pytest.approx(compute_ndre(a, b), abs=1e-12)

    @given(st.floats(min_value=0, max_value=10), reflectance)
    def test_range(self, a, b):
        assert -1.0 <= compute_ndre(a, b) <= 1.0


class TestSeriesFromBands:
    def test_constant_series(self):
        s = series_from_band_table([(d, 0.5, 0.25) for d in (0, 15, 30, 45, 60)], "p")
        assert s.values == pytest.approx([1 / 3] * 5, abs=1e-15)
        assert s.dates == (0, 15, 30, 45, 60)

    def test_single_row(self):
        s = series_from_band_table([(0, 0.6, 0.2)], "p")
        assert len(s.values) == 1 and s.dates == (0,)

    def test_duplicate_dates(self):
        with pytest.raises(FormatError):
            series_from_band_table([(0, 0.5, 0.2), (10, 0.5, 0.2), (10, 0.5, 0.2)], "p")

    def test_no_normalization(self):
        s = series_from_band_table([(0, 0.9, 0.1), (5, 0.3, 0.1)], "p")
        assert s.values == pytest.approx([0.8, 0.5])


class TestNdreSeries:
    def test_dates_must_start_at_zero(self):
        with pytest.raises(FormatError):
            NdreSeries("p", (0.1, 0.2), (5, 10))

    def test_value_range(self):
        with pytest.raises(DomainError):
            NdreSeries("p", (0.1, 1.5), (0, 10))

    def test_length_mismatch(self):
        with pytest.raises(FormatError):
            NdreSeries("p", (0.1, 0.2, 0.3), (0, 10))


class TestDataset:
    def test_shared_dates_required(self):
        a = NdreSeries("a", (0.1, 0.2), (0, 10))
        b = NdreSeries("b", (0.1, 0.2), (0, 11))
        with pytest.raises(FormatError):
            Dataset.from_series([a, b])

    def test_unique_ids(self):
        with pytest.raises(Exception):
            Dataset(("a", "a"), (0, 10), np.zeros((2, 2)))

    def test_mean_ndre(self):
        d = Dataset(("a", "b"), (0, 10), np.array([[0.2, 0.4], [0.0, 1.0]]))
        assert d.mean_ndre.tolist() == pytest.approx([0.3, 0.5])


class TestSynthesize:
    def test_closed_form_trajectory(self):
        # severe patch, onset 0, decline 0.01/day from 0.55
        got = trajectory(0.55, 0, 0.01, (0, 15, 30, 45, 60))
        assert got == pytest.approx([0.55, 0.40, 0.25, 0.10, -0.05], abs=1e-12)

    def test_degenerate_mix_all_healthy(self):
        d = synthesize(SynthConfig(n_patches=50, stage_mix=(1, 0, 0, 0), seed=11))
        assert set(d.truth_stage) == {Stage.HEALTHY}
        assert all(o is None for o in d.truth_onset)

    def test_deterministic(self):
        cfg = SynthConfig(n_patches=100, seed=4)
        assert dataset_to_csv(synthesize(cfg)) == dataset_to_csv(synthesize(cfg))

    def test_seed_changes_output(self):
        a = synthesize(SynthConfig(n_patches=50, seed=1))
        b = synthesize(SynthConfig(n_patches=50, seed=2))
        assert not np.array_equal(a.values, b.values)

    @pytest.mark.parametrize("seed", range(5))
    def test_noise_free_means_in_band(self, seed):
        d = synthesize(SynthConfig(n_patches=300, noise_sd=0.0, seed=seed))
        for m, s in zip(d.mean_ndre, d.truth_stage):
            lo, hi = stage_band(s)
            assert lo <= m < hi

    def test_healthy_flat_and_high(self, clean_corpus):
        for row, s in zip(clean_corpus.values, clean_corpus.truth_stage):
            if s is Stage.HEALTHY:
                assert np.ptp(row) == 0.0
                assert row.mean() >= REFERENCE_THRESHOLDS[2]

    def test_stressed_flat_before_onset(self, clean_corpus):
        dates = np.array(clean_corpus.dates)
        for row, s, onset in zip(clean_corpus.values, clean_corpus.truth_stage, clean_corpus.truth_onset):
            if s is not Stage.HEALTHY:
                before = row[dates <= onset]
                assert np.ptp(before) == 0.0
                assert row[-1] < row[0]

    def test_stage_counts(self):
        d = synthesize(SynthConfig(n_patches=1000, seed=0))
        counts = {s: d.truth_stage.count(s) for s in Stage}
        assert counts[Stage.HEALTHY] == 600
        assert counts[Stage.SEVERE] == 120

    def test_mix_must_sum_to_one(self):
        with pytest.raises(ParameterError):
            SynthConfig(stage_mix=(0.5, 0.2, 0.1, 0.1))

    def test_negative_noise(self):
        with pytest.raises(ParameterError):
            SynthConfig(noise_sd=-0.1)

    def test_heavy_noise_clips_and_warns(self):
        with pytest.warns(UserWarning, match="clipped"):
            d = synthesize(SynthConfig(n_patches=200, noise_sd=0.5, seed=0))
        assert np.all(np.abs(d.values) <= 1.0)

    def test_no_warning_at_default_noise(self):
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            synthesize(SynthConfig(n_patches=200, seed=0))

    def test_config_round_trip(self):
        cfg = SynthConfig(n_patches=30, noise_sd=0.03, onset_day_range=(20, 30), seed=9)
        assert SynthConfig.from_dict(cfg.to_dict()) == cfg


class TestPersistence:
    def test_round_trip_file(self, tmp_path):
        d = synthesize(SynthConfig(n_patches=3, seed=2))
        save_dataset(d, tmp_path / "d.csv")
        assert load_dataset(tmp_path / "d.csv") == d

    def test_round_trip_without_truth(self):
        d = Dataset(("x", "y"), (0, 7), np.array([[0.1, -0.2], [0.3, 0.4]]))
        back = dataset_from_csv(dataset_to_csv(d))
        assert back == d and not back.has_truth

    def test_header_format(self):
        d = synthesize(SynthConfig(n_patches=2, seed=0))
        head = dataset_to_csv(d).splitlines()[0]
        assert head == "patch_id,day_0,day_15,day_30,day_45,day_60,truth_stage,truth_onset_day"

    def test_out_of_range_value_reports_row(self):
        text = "patch_id,day_0,day_10\na,0.1,0.2\nb,1.5,0.2\n"
        with pytest.raises(ParseError) as exc:
            dataset_from_csv(text)
        assert exc.value.row == 3

    def test_ragged_row(self):
        with pytest.raises(ParseError, match="row 2"):
            dataset_from_csv("patch_id,day_0,day_10\na,0.1\n")

    def test_malformed_header(self):
        with pytest.raises(ParseError):
            dataset_from_csv("id,day_0\na,0.1\n")

    def test_empty_file(self):
        with pytest.raises(ParseError, match="no records"):
            dataset_from_csv("")

    @given(st.lists(st.floats(min_value=-1, max_value=1, allow_nan=False), min_size=4, max_size=4))
    def test_round_trip_precision(self, vals):
        d = Dataset(("a", "b"), (0, 9), np.array(vals).reshape(2, 2))
        back = dataset_from_csv(dataset_to_csv(d))
        assert np.array_equal(back.values, d.values)
        # at least 15 significant digits survive
        for a, b in zip(back.values.ravel(), d.values.ravel()):
            assert a == b or math.isclose(a, b, rel_tol=1e-15)
