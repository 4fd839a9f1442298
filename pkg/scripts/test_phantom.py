"""Synthetic phantom generator."""
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(__file__)))

import numpy as np
import pytest

from thalseg.errors import DataError
from thalseg.phantom import (
    MODALITIES,
    PhantomSpec,
    degrade,
    generate_case,
    generate_dataset,
    generate_head,
    generate_shifted_pool,
    make_template,
    nearest_mean_accuracy,
    split_dataset,
    template_labels,
)
from thalseg.volumes import Side, Space


def test_case_is_deterministic(small_spec):
    a = generate_case(small_spec, 5)
    b = generate_case(small_spec, 5)
    for m in MODALITIES:
        assert np.array_equal(a.modalities[m].data, b.modalities[m].data)
    assert np.array_equal(a.labels.data, b.labels.data)
    assert (a.meta.age, a.meta.sex) == (b.meta.age, b.meta.sex)


def test_case_layout(small_spec):
    case = generate_case(small_spec, 1)
    assert case.shape == tuple(small_spec.grid)
    assert case.labels.space is Space.CROP
    assert case.meta.side is Side.LEFT
    counts = case.labels.counts()
    assert set(counts) == {1, 2, 3, 4}
    assert all(n > 0 for n in counts.values())
    assert 20 <= case.meta.age <= 80
    assert case.meta.sex in ("F", "M")


def test_nuclei_sizes_follow_library_order(small_spec):
    counts = np.bincount(np.asarray(template_labels(small_spec)).ravel(), minlength=5)
    # Ventral Lateral Posterior (4) is the largest of the first four structures.
    assert counts[4] == counts[1:5].max()


def test_full_schema_fills_intermediate_space():
    spec = PhantomSpec(grid=(48, 48, 48), n_nuclei=13, deform_amplitude=0.0)
    labels = np.asarray(template_labels(spec))
    assert set(np.unique(labels)) == set(range(14))


def test_noise_free_modalities_are_piecewise_constant(small_spec):
    spec = small_spec.model_copy(update={"noise_sigma": 0.0})
    case = generate_case(spec, 2)
    table = spec.resolved_contrast()["WMn"]
    for label in range(spec.n_nuclei + 1):
        values = case.modalities["WMn"].data[case.labels.data == label]
        assert np.allclose(values, table[label][0])


def test_nearest_mean_accuracy_bounds(small_spec):
    case = generate_case(small_spec, 0)
    table = small_spec.resolved_contrast()["WMn"]
    exact = nearest_mean_accuracy(case.labels.data, table, 0.0)
    noisy = nearest_mean_accuracy(case.labels.data, table, 0.5)
    assert exact == 1.0
    assert 0.0 < noisy < 1.0


def test_dataset_and_split(small_spec):
    cases = generate_dataset(small_spec, 10, base_seed=4)
    assert len({c.meta.case_id for c in cases}) == 10
    train, val, test = split_dataset(cases, (0.8, 0.1, 0.1))
    assert (len(train), len(val), len(test)) == (8, 1, 1)
    with pytest.raises(DataError):
        split_dataset(cases, (0.5, 0.5, 0.5))


def test_threaded_generation_matches_serial(small_spec):
    serial = generate_dataset(small_spec, 3, base_seed=8)
    threaded = generate_dataset(small_spec, 3, base_seed=8, workers=3)
    for a, b in zip(serial, threaded):
        assert np.array_equal(a.modalities["T1"].data, b.modalities["T1"].data)


def test_shifted_pool_drifts(small_spec):
    pool = generate_shifted_pool(small_spec, 4, base_seed=0)
    assert all(c.meta.source == "shifted" for c in pool)
    backgrounds = [float(c.modalities["T1"].data[c.labels.data == 0].mean()) for c in pool]
    assert backgrounds == sorted(backgrounds)


def test_degrade_keeps_shape_and_labels(small_cases):
    case = small_cases[0]
    low = degrade(case, 2)
    assert low.shape == case.shape
    assert np.array_equal(low.labels.data, case.labels.data)
    assert not np.array_equal(low.modalities["T1"].data, case.modalities["T1"].data)


def test_head_has_both_thalami(small_spec):
    head = generate_head(small_spec, seed=1, native_grid=(32, 32, 32))
    assert head.t1_hr.shape == (64, 64, 64)
    assert head.t1_native.shape == (32, 32, 32)
    assert head.t1_native.space is Space.NATIVE
    assert head.right_box.offset[0] == 64 - head.left_box.offset[0] - 24
    assert head.right_labels.side is Side.RIGHT
    assert np.array_equal(head.right_labels.data, head.left_labels.data[::-1])
    assert 0 < head.icv_mm3 < 32 ** 3
    template = make_template(small_spec, native_grid=(32, 32, 32))
    assert template.space is Space.MNI_STD


def test_head_rejects_mismatched_box(small_spec):
    from thalseg.volumes import CropBox

    with pytest.raises(DataError):
        generate_head(small_spec, 0, native_grid=(32, 32, 32), left_box=CropBox((0, 0, 0), (16, 16, 16)))
