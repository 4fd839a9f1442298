"""Loss values and gradients, Dice against voxel counting, Wilcoxon."""
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(__file__)))

import itertools
import math

import numpy as np
import pytest
import torch
from scipy import stats

from thalseg.errors import DataError
from thalseg.losses_metrics import (
    LabelWeights,
    bce,
    combine_terms,
    composite_loss,
    dice,
    dice_report,
    gdl,
    label_weights_from_training,
    reference_label_weights,
    summarize_reports,
    wilcoxon_signed_rank,
)
from thalseg.volumes import THALAMUS_SCHEMA, LabelMap


def _one_hot(labels, n):
    return torch.from_numpy(np.moveaxis(np.eye(n)[labels], -1, 0))


def test_gdl_of_perfect_prediction_is_zero():
    labels = np.random.default_rng(0).integers(0, 4, (5, 5, 5))
    y = _one_hot(labels, 4)
    assert float(gdl(y, y, LabelWeights.uniform(3))) == 0.0


def test_gdl_two_voxel_scalar_oracle():
    # channels: background, class 1, class 2; voxel 0 is class 1, voxel 1 is class 2
    y = torch.tensor([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    p = torch.tensor([[0.0, 0.0], [0.5, 0.5], [0.5, 0.5]], dtype=torch.float64)
    inter = 0.5 + 0.5
    total = (1.0 + 1.0) + (1.0 + 1.0)
    expected = 1.0 - 2.0 * inter / total
    assert float(gdl(y, p, LabelWeights.uniform(2))) == pytest.approx(expected, abs=1e-12)


def test_gdl_invariant_to_weight_scale():
    rng = np.random.default_rng(1)
    y = _one_hot(rng.integers(0, 3, (4, 4, 4)), 3)
    p = torch.softmax(torch.from_numpy(rng.normal(size=(3, 4, 4, 4))), dim=0)
    w = np.array([0.3, 2.0])
    a = float(gdl(y, p, LabelWeights(w)))
    b = float(gdl(y, p, LabelWeights(w * 17.0)))
    assert a == pytest.approx(b, abs=1e-12)
    assert 0.0 <= a <= 1.0


def test_gdl_rejects_shape_mismatch_and_weight_count():
    y = torch.zeros(3, 2, 2, 2)
    with pytest.raises(DataError):
        gdl(y, torch.zeros(3, 2, 2, 3), LabelWeights.uniform(2))
    with pytest.raises(DataError):
        gdl(y, y, LabelWeights.uniform(3))


def test_log_eps_boundary_value():
    assert combine_terms(0.0, 0.0, 1e-7) == pytest.approx(-16.1181, abs=1e-3)
    assert combine_terms(0.2, 0.1) > combine_terms(0.1, 0.1)
    with pytest.raises(DataError):
        combine_terms(0.0, 0.0, 0.0)


def test_bce_is_finite_on_hard_probabilities():
    y = torch.tensor([1.0, 0.0])
    p = torch.tensor([0.0, 1.0])
    value = float(bce(y, p))
    assert math.isfinite(value)
    assert value == pytest.approx(-math.log(1e-7), rel=1e-6)


def test_composite_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(2)
    y = _one_hot(rng.integers(0, 3, (2, 2, 1)), 3)
    logits = torch.from_numpy(rng.normal(size=(3, 2, 2, 1))).requires_grad_(True)
    w = LabelWeights(np.array([0.7, 1.3]))

    def f(z):
        return composite_loss(y, torch.softmax(z, dim=0), w)

    f(logits).backward()
    analytic = logits.grad.detach().numpy().ravel()
    base = logits.detach().numpy()
    numeric = np.zeros_like(analytic)
    h = 1e-6
    for i in range(base.size):
        up, down = base.copy().ravel(), base.copy().ravel()
        up[i] += h
        down[i] -= h
        fu = float(f(torch.from_numpy(up.reshape(base.shape))))
        fd = float(f(torch.from_numpy(down.reshape(base.shape))))
        numeric[i] = (fu - fd) / (2 * h)
    rel = np.linalg.norm(analytic - numeric) / max(np.linalg.norm(numeric), 1e-12)
    assert rel <= 1e-4


def test_composite_loss_gradcheck():
    rng = np.random.default_rng(3)
    y = _one_hot(rng.integers(0, 3, (3, 3, 3)), 3)
    logits = torch.from_numpy(rng.normal(size=(3, 3, 3, 3))).requires_grad_(True)
    w = LabelWeights(np.array([1.0, 2.0]))
    assert torch.autograd.gradcheck(lambda z: composite_loss(y, torch.softmax(z, dim=0), w), (logits,))


def test_dice_counting_example():
    schema = THALAMUS_SCHEMA.subset(1)
    a = np.zeros((2, 2, 2), dtype=np.int16)
    b = np.zeros((2, 2, 2), dtype=np.int16)
    a.flat[[0, 1]] = 1
    b.flat[[0, 1, 2, 3]] = 1
    assert dice(LabelMap(a, schema), LabelMap(b, schema), 1) == pytest.approx(2 * 2 / 6)


def test_dice_matches_brute_force_on_random_pairs():
    schema = THALAMUS_SCHEMA.subset(3)
    rng = np.random.default_rng(4)
    for _ in range(200):
        a = rng.integers(0, 4, (4, 3, 3))
        b = rng.integers(0, 4, (4, 3, 3))
        la, lb = LabelMap(a, schema), LabelMap(b, schema)
        for label in (1, 2, 3):
            inter = sum(1 for x, y in zip(a.ravel(), b.ravel()) if x == label and y == label)
            size = sum(1 for x in a.ravel() if x == label) + sum(1 for y in b.ravel() if y == label)
            expected = 1.0 if size == 0 else 2.0 * inter / size
            assert dice(la, lb, label) == expected


def test_dice_report_identical_and_disjoint():
    schema = THALAMUS_SCHEMA.subset(2)
    a = np.zeros((4, 4, 4), dtype=np.int16)
    a[:2] = 1
    a[2:] = 2
    report = dice_report(LabelMap(a, schema), LabelMap(a, schema))
    assert report.mean == 1.0 and report.whole == 1.0
    b = np.where(a == 1, 2, 1)
    disjoint = dice_report(LabelMap(a, schema), LabelMap(b, schema))
    assert disjoint.mean == 0.0
    assert disjoint.whole == 1.0
    with pytest.raises(DataError):
        dice_report(LabelMap(a, schema), LabelMap(a, THALAMUS_SCHEMA))
    summary = summarize_reports([report, disjoint])
    assert set(summary["structure"]) >= {"Average", "Whole thalamus"}


def test_label_weights(small_cases, schema):
    w = label_weights_from_training(small_cases)
    assert w.n_labels == schema.n_labels
    counts = np.mean([[c.labels.counts()[i] for i in schema.ids] for c in small_cases], axis=0)
    assert np.allclose(w.weights, 1.0 / counts)
    assert reference_label_weights(THALAMUS_SCHEMA).n_labels == 13
    with pytest.raises(DataError):
        label_weights_from_training([])


def test_wilcoxon_exact_and_approx():
    x = [3, 5, 8, 12, 17, 23, 30]
    y = [2, 3, 5, 8, 12, 17, 23]
    res = wilcoxon_signed_rank(x, y)
    assert res.method == "exact"
    assert res.statistic == 0.0
    assert res.p_value == pytest.approx(2 / 2 ** 7)
    big = wilcoxon_signed_rank(np.arange(30) % 5 + 1.0, np.zeros(30))
    assert big.method == "approx"
    assert big.p_value < 0.001


def _enumerated_p(d):
    ranks = stats.rankdata(np.abs(d))
    w_plus = ranks[d > 0].sum()
    centre = ranks.sum() / 2.0
    observed = abs(w_plus - centre)
    hits = sum(
        abs(sum(r for r, s in zip(ranks, signs) if s) - centre) >= observed - 1e-9
        for signs in itertools.product((0, 1), repeat=len(d))
    )
    return hits / 2 ** len(d)


def test_wilcoxon_six_positive_differences():
    res = wilcoxon_signed_rank([1, 2, 3, 4, 5, 6], [0] * 6)
    assert res.method == "exact"
    assert res.statistic == 0.0
    assert res.p_value == pytest.approx(2 / 64)


def test_wilcoxon_tied_magnitudes_stay_exact():
    res = wilcoxon_signed_rank([1, 1, 2, 2, 3, 3], [0] * 6)
    assert res.method == "exact"
    assert res.p_value == pytest.approx(0.03125)


@pytest.mark.parametrize("d", [
    [1.0, -2.0, 3.0, 4.0, -5.0],
    [0.5, 0.5, -0.5, 1.5, 2.0, -2.0, 3.0],
    [1.0, 1.0, 1.0, -1.0, 2.0, 2.0, -3.0, 4.0],
    [0.2, -0.4, 0.4, 0.6, -0.6, 0.6, 0.8, 1.0, -1.2, 1.2],
])
def test_wilcoxon_exact_matches_sign_enumeration(d):
    d = np.asarray(d)
    res = wilcoxon_signed_rank(d, np.zeros_like(d))
    assert res.method == "exact"
    assert res.p_value == pytest.approx(_enumerated_p(d), abs=1e-12)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_wilcoxon_is_antisymmetric(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=12).round(1)
    y = rng.normal(size=12).round(1)
    assert wilcoxon_signed_rank(x, y).p_value == pytest.approx(wilcoxon_signed_rank(y, x).p_value, abs=1e-15)
    assert wilcoxon_signed_rank(x, y).statistic == wilcoxon_signed_rank(y, x).statistic


def test_composite_loss_invariant_to_label_permutation():
    rng = np.random.default_rng(5)
    n = 5
    y = _one_hot(rng.integers(0, n, (4, 4, 4)), n)
    p = torch.softmax(torch.from_numpy(rng.normal(size=(n, 4, 4, 4))), dim=0)
    w = rng.uniform(0.1, 3.0, n - 1)
    torch.manual_seed(0)
    perm = torch.randperm(n - 1) + 1
    order = torch.cat([torch.zeros(1, dtype=torch.long), perm])
    a = float(composite_loss(y, p, LabelWeights(w)))
    b = float(composite_loss(y[order], p[order], LabelWeights(w[(perm - 1).numpy()])))
    assert a == pytest.approx(b, abs=1e-10)


def test_wilcoxon_rejects_degenerate_samples():
    with pytest.raises(DataError):
        wilcoxon_signed_rank([1, 2, 3, 4, 5], [1, 2, 3, 4, 5])
    with pytest.raises(DataError):
        wilcoxon_signed_rank([1, 2], [0, 0])
    with pytest.raises(DataError):
        wilcoxon_signed_rank([1, 2, 3], [1, 2])
