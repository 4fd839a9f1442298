"""Denoising, bias correction, affine alignment, intensity mapping, ICV."""
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(__file__)))

import numpy as np
import pytest
from scipy import ndimage

from thalseg.errors import DataError
from thalseg.phantom import generate_head, make_template
from thalseg.preprocessing import (
    affine_to_template,
    bias_correct,
    denoise,
    estimate_bias_field,
    extract_icv,
    normalize_intensity,
    piecewise_linear_map,
)
from thalseg.volumes import Space, Volume3D

NATIVE = (1.0, 1.0, 1.0)


def _shells(n=32):
    """Three-tissue ellipsoid on a zero background."""
    coords = np.indices((n, n, n), dtype=np.float64)
    centre = (n - 1) / 2.0
    r = np.sqrt(np.sum(((coords - centre) / (0.42 * n)) ** 2, axis=0))
    data = np.zeros((n, n, n))
    data[r <= 1.0] = 0.80
    data[(r <= 1.0) & (r > 0.7)] = 0.65
    data[(r <= 1.0) & (r > 0.9)] = 0.55
    return data


def test_denoise_reduces_error():
    clean = ndimage.gaussian_filter(_shells(24), 1.0)
    noisy = clean + 0.05 * np.random.default_rng(0).standard_normal(clean.shape)
    out = denoise(Volume3D(noisy, NATIVE, Space.NATIVE))
    assert np.abs(out.data - clean).mean() < np.abs(noisy - clean).mean()
    assert "denoise_sigma" in out.provenance
    flat = Volume3D(np.ones((8, 8, 8)), NATIVE, Space.NATIVE)
    assert denoise(flat) is flat


def test_bias_field_is_recovered():
    clean = _shells(32)
    x = np.linspace(-1.0, 1.0, 32)[:, None, None]
    true_field = np.exp(0.25 * x) * np.ones_like(clean)
    biased = Volume3D(clean * true_field, NATIVE, Space.NATIVE)
    mask = clean > 0
    estimated = estimate_bias_field(biased)
    assert np.corrcoef(estimated[mask], true_field[mask])[0, 1] > 0.95
    corrected = bias_correct(biased)
    assert np.corrcoef(corrected.data[mask], clean[mask])[0, 1] > 0.95
    assert corrected.data[mask].mean() == pytest.approx(biased.data[mask].mean(), rel=1e-4)


def test_bias_correction_shifts_nonpositive_intensities(caplog):
    data = _shells(16) - 0.6
    out = bias_correct(Volume3D(data, NATIVE, Space.NATIVE), mask=np.abs(data + 0.6) > 0)
    assert np.all(np.isfinite(out.data))
    assert "shifting" in caplog.text
    with pytest.raises(DataError):
        estimate_bias_field(Volume3D(data, NATIVE, Space.NATIVE), mask=np.abs(data + 0.6) > 0)


def test_affine_self_registration_is_identity(small_spec):
    template = make_template(small_spec, native_grid=(32, 32, 32))
    aligned, transform = affine_to_template(template, template, factors=(2, 1), iterations=20)
    assert transform.is_identity(tol=0.05)
    assert aligned.shape == template.shape
    assert aligned.space is Space.MNI_STD


def test_affine_recovers_a_translation(small_spec):
    template = make_template(small_spec, native_grid=(32, 32, 32))
    shift = np.array([3.0, -2.0, 1.0])
    moved = Volume3D(ndimage.shift(template.data, shift, order=1), NATIVE, Space.NATIVE)
    aligned, transform = affine_to_template(moved, template, factors=(2, 1))
    m = transform.voxel_matrix()
    assert np.allclose(m[:3, 3], shift, atol=0.5)
    assert np.allclose(m[:3, :3], np.eye(3), atol=0.05)
    inner = (slice(6, 26),) * 3
    assert np.abs(aligned.data[inner] - template.data[inner]).mean() < 0.08
    assert transform.to_dict()["trace"]


def test_piecewise_linear_map():
    src, dst = [1.0, 2.0, 4.0], [10.0, 20.0, 30.0]
    out = piecewise_linear_map(np.array([0.0, 1.0, 1.5, 2.0, 3.0, 4.0, 6.0]), src, dst)
    assert np.allclose(out, [0.0, 10.0, 15.0, 20.0, 25.0, 30.0, 40.0])
    with pytest.raises(DataError):
        piecewise_linear_map(np.zeros(3), [1.0, 1.0], [0.0, 1.0])
    with pytest.raises(DataError):
        piecewise_linear_map(np.zeros(3), [1.0, 2.0], [1.0, 0.0])


def test_normalize_intensity_is_monotone_and_hits_targets():
    rng = np.random.default_rng(1)
    clean = _shells(24) * 300.0
    data = clean + rng.normal(0, 3.0, clean.shape) * (clean > 0)
    out = normalize_intensity(Volume3D(data, NATIVE, Space.NATIVE))
    order = np.argsort(data, axis=None)
    assert np.all(np.diff(out.data.ravel()[order].astype(np.float64)) >= -1e-6)
    for value, target in ((165.0, 0.3), (195.0, 0.55), (240.0, 0.8)):
        assert out.data[np.isclose(clean, value)].mean() == pytest.approx(target, abs=0.03)
    with pytest.raises(DataError):
        normalize_intensity(Volume3D(np.where(clean > 0, 1.0, 0.0), NATIVE, Space.NATIVE))


def test_icv_matches_phantom_head(small_spec):
    head = generate_head(small_spec, seed=2, native_grid=(48, 48, 48))
    mask, icv = extract_icv(head.t1_native)
    assert mask.shape == head.t1_native.shape
    assert icv == pytest.approx(head.icv_mm3, rel=0.05)
    with pytest.raises(DataError):
        extract_icv(Volume3D(np.zeros((8, 8, 8)), NATIVE, Space.NATIVE))
