"""Volumes, asymmetry, normative bounds and dispersion comparison."""
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(__file__)))

import json

import numpy as np
import pandas as pd
import pytest

from thalseg.errors import DataError
from thalseg.losses_metrics import WHOLE_THALAMUS
from thalseg.report import (
    NormativeBin,
    NormativeModel,
    asymmetry,
    build_report,
    compare_dispersion,
    compute_volumes,
    fit_normative,
    volume_key,
    write_report,
)
from thalseg.volumes import THALAMUS_SCHEMA, LabelMap, Side

SCHEMA = THALAMUS_SCHEMA.subset(2)
KEYS = [f"k{i}" for i in range(8)]


def _maps(left_voxels=100, right_voxels=80):
    left = np.zeros((10, 10, 10), dtype=np.int16)
    left.flat[:left_voxels] = 1
    left.flat[left_voxels:left_voxels + 30] = 2
    right = np.zeros((10, 10, 10), dtype=np.int16)
    right.flat[:right_voxels] = 1
    return LabelMap(left, SCHEMA, side=Side.LEFT), LabelMap(right, SCHEMA, side=Side.RIGHT)


def _population(n_per_sex=30, noise=0.0, seed=0, ages=None):
    rng = np.random.default_rng(seed)
    out = []
    for sex in ("F", "M"):
        subject_ages = ages if ages is not None else rng.uniform(20, 70, n_per_sex)
        for age in subject_ages:
            base = {k: 100.0 + i * 10 + rng.normal(0, 1.0) for i, k in enumerate(KEYS)}
            out.append((float(age), sex, {k: v + noise * rng.normal() for k, v in base.items()}))
    return out


def test_volume_is_voxels_times_voxel_size():
    left, right = _maps()
    report = compute_volumes(left, right)
    assert report.voxel_mm3 == 0.125
    row = report.row(SCHEMA.entries[0][1], "left")
    assert row.voxels == 100
    assert row.volume_mm3 == 12.5
    assert compute_volumes(left, right, spacing=(1, 1, 1)).row(SCHEMA.entries[0][1], "left").volume_mm3 == 100.0
    with pytest.raises(DataError):
        compute_volumes(left, right, spacing=(1, 0, 1))


def test_structures_add_up_to_whole_thalamus():
    report = compute_volumes(*_maps())
    for side in ("left", "right"):
        parts = sum(report.row(name, side).volume_mm3 for _, name in SCHEMA.entries)
        assert parts == pytest.approx(report.row(WHOLE_THALAMUS, side).volume_mm3)


def test_asymmetry():
    assert asymmetry(110, 90) == pytest.approx(20.0)
    assert asymmetry(0, 0) is None
    assert asymmetry(5, 0) == pytest.approx(200.0)
    rng = np.random.default_rng(1)
    for a, b in rng.uniform(0, 50, size=(100, 2)):
        assert asymmetry(a, b) == pytest.approx(-asymmetry(b, a))
    with pytest.raises(DataError):
        asymmetry(-1, 3)


def test_identical_population_has_zero_width():
    population = [(float(age), sex, {"k": 7.0}) for sex in ("F", "M") for age in np.linspace(20, 70, 25)]
    model = fit_normative(population)
    assert all(w == 0.0 for w in model.widths()["k"])
    assert model.bounds("k", "F", 33) == (7.0, 7.0)
    assert model.bounds("k", "X", 33) is None


def test_wider_percentiles_give_wider_bounds():
    population = _population()
    narrow = fit_normative(population)
    wide = fit_normative(population, lower_pct=1, upper_pct=99)
    for key in KEYS:
        assert all(w >= n for w, n in zip(wide.widths()[key], narrow.widths()[key]))


def test_population_needs_enough_subjects_per_sex():
    with pytest.raises(DataError, match="at least 20"):
        fit_normative(_population(n_per_sex=10))
    with pytest.raises(DataError):
        fit_normative(_population(), lower_pct=60, upper_pct=40)


def test_empty_window_borrows_nearest_subjects(caplog):
    ages = np.concatenate([np.linspace(20, 29, 15), np.linspace(60, 70, 15)])
    model = fit_normative(_population(ages=ages))
    assert "nearest" in caplog.text
    bins = model.bins["k0"]["F"]
    assert all(b.n > 0 for b in bins)


def test_wide_frame_input_matches_tuples():
    population = _population(n_per_sex=20)
    wide = pd.DataFrame([dict(age=a, sex=s, **v) for a, s, v in population])
    assert fit_normative(wide) == fit_normative(population)


def test_noisier_population_is_more_dispersed():
    clean = fit_normative(_population(seed=3))
    noisy = fit_normative(_population(noise=3.0, seed=3))
    result = compare_dispersion(clean, noisy)
    assert (result.per_structure["width_b"] > result.per_structure["width_a"]).all()
    assert result.overall.p_value < 0.05
    assert result.n_significant >= 1


def test_normative_model_round_trip(tmp_path):
    model = fit_normative(_population())
    back = NormativeModel.load(model.save(str(tmp_path / "normative.json")))
    assert back == model
    with pytest.raises(DataError):
        NormativeModel.load(str(tmp_path / "absent.json"))
    with pytest.raises(ValueError):
        NormativeBin(age_lo=0, age_hi=10, lower=2.0, upper=1.0, n=3)


def test_report_flags_and_files(tmp_path):
    left, right = _maps()
    whole = volume_key(WHOLE_THALAMUS, "left")
    model = NormativeModel(bins={whole: {"F": [NormativeBin(age_lo=30, age_hi=40, lower=0.0, upper=1.0, n=25)]}})
    report = build_report(left, right, icv_mm3=1000.0, subject_id="s1", age=35, sex="F", normative=model)
    assert report.row(WHOLE_THALAMUS, "left").flag == "above"
    assert report.row(WHOLE_THALAMUS, "right").flag is None
    first = report.row(SCHEMA.entries[0][1], "left")
    assert first.percent_icv == pytest.approx(1.25)
    assert first.asymmetry == pytest.approx(200.0 * (100 - 80) / 180)
    assert report.row(SCHEMA.entries[0][1], "right").asymmetry == pytest.approx(first.asymmetry)

    paths = write_report(report, str(tmp_path / "report"))
    with open(paths["json"], "r", encoding="utf-8") as fh:
        saved = json.load(fh)
    assert saved["subject"]["id"] == "s1"
    frame = pd.read_csv(paths["csv"])
    assert list(frame.columns)[:4] == ["structure", "side", "voxels", "volume_mm3"]
    assert len(frame) == 2 * (SCHEMA.n_labels + 1)

    with pytest.raises(DataError):
        build_report(left, right, icv_mm3=0.0)


def test_report_without_demographics_skips_flags(caplog):
    model = NormativeModel()
    report = build_report(*_maps(), normative=model)
    assert all(r.flag is None for r in report.rows)
    assert "flags skipped" in caplog.text
