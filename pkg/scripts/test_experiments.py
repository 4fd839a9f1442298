"""Ablation studies: table layout on a tiny run, direction of effects in the slow run."""
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(__file__)))

import numpy as np
import pandas as pd
import pytest

from thalseg import experiments
from thalseg.config import config_from_dict
from thalseg.errors import DataError
from thalseg.experiments import ablate, ablation_table, evaluate, train_helper
from thalseg.losses_metrics import wilcoxon_signed_rank
from thalseg.models import TrainedModel

TINY = {
    "data": {"n_cases": 10, "phantom": {"grid": [24, 24, 24], "n_nuclei": 4, "deform_amplitude": 1.0}},
    "atlas": {"n_cases": 3},
    "train": {"auxiliary": {"registration_width": 2, "optimizer": {"epochs": 1, "steps_per_epoch": 1}}},
    "ablate": {"seeds": [0], "width": 2, "optimizer": {"epochs": 1, "steps_per_epoch": 1}},
}


def test_tiny_ablation_has_every_variant():
    rows, table = ablate(config_from_dict(TINY))
    assert set(rows.columns) >= {"study", "variant", "seed", "case_id", "dice", "whole_dice"}
    variants = set(zip(table["study"], table["variant"]))
    assert variants == {
        ("architecture", "dpn"), ("architecture", "unet"),
        ("resolution", "hr"), ("resolution", "lr"),
        ("modality", "T1"), ("modality", "T1+WMn"),
        ("ensemble", "no-atlas"), ("ensemble", "atlas"), ("ensemble", "ensemble"),
    }
    assert rows["dice"].between(0.0, 1.0).all()
    reference = table[(table["study"] == "architecture") & (table["variant"] == "unet")]
    assert reference["p_value"].isna().all()


def test_ensemble_study_uses_registered_priors_when_enabled(monkeypatch):
    seen = []
    original = experiments.attach_priors

    def recording(cases, lib, reg_model, *args, **kwargs):
        seen.append(reg_model)
        return original(cases, lib, reg_model, *args, **kwargs)

    monkeypatch.setattr(experiments, "attach_priors", recording)
    only_ensemble = dict(TINY, ablate=dict(TINY["ablate"], studies=["ensemble"]))
    ablate(config_from_dict(only_ensemble))
    assert len(seen) == 3
    assert all(isinstance(m, TrainedModel) and m.spec.name == "registration" for m in seen)

    seen.clear()
    unregistered = dict(only_ensemble, atlas={"n_cases": 3, "use_registration": False})
    ablate(config_from_dict(unregistered))
    assert seen == [None, None, None]


def test_ablation_table_pairs_by_seed_and_case():
    rows = pd.DataFrame([
        {"study": "resolution", "variant": v, "seed": s, "case_id": f"c{i}", "dice": d, "whole_dice": d}
        for s in range(2) for i in range(4) for v, d in (("hr", 0.9 - 0.01 * i), ("lr", 0.7 - 0.02 * i))
    ])
    table = ablation_table(rows).set_index("variant")
    assert table.loc["hr", "n"] == 8
    assert table.loc["hr", "mean_dice"] == pytest.approx(np.mean([0.9 - 0.01 * i for i in range(4)]))
    expected = wilcoxon_signed_rank(rows[rows.variant == "hr"]["dice"].to_numpy(),
                                    rows[rows.variant == "lr"]["dice"].to_numpy()).p_value
    assert table.loc["hr", "p_value"] == pytest.approx(expected)


def test_helpers_and_evaluate_reject_bad_input(small_cases):
    config = config_from_dict(TINY)
    with pytest.raises(DataError):
        train_helper("diffusion", config, small_cases)
    with pytest.raises(DataError):
        evaluate([], [], small_cases[0].labels.schema)


@pytest.mark.slow
def test_ablation_directions_on_phantoms():
    config = config_from_dict({
        "data": {"n_cases": 40, "phantom": {"grid": [48, 48, 48], "n_nuclei": 6}},
        "atlas": {"n_cases": 10},
        "workers": 4,
        "ablate": {"seeds": [0, 1, 2, 3, 4], "width": 8,
                   "optimizer": {"epochs": 20, "steps_per_epoch": 20}},
    })
    rows, table = ablate(config)
    means = {(s, v): m for s, v, m in zip(table["study"], table["variant"], table["mean_dice"])}
    pvals = {(s, v): p for s, v, p in zip(table["study"], table["variant"], table["p_value"])}
    assert means[("architecture", "dpn")] >= means[("architecture", "unet")]
    assert means[("resolution", "hr")] > means[("resolution", "lr")]
    assert pvals[("resolution", "hr")] < 0.05
    assert means[("modality", "T1+WMn")] > means[("modality", "T1")]
    assert pvals[("modality", "T1+WMn")] < 0.05
    best_single = max(means[("ensemble", "atlas")], means[("ensemble", "no-atlas")])
    assert means[("ensemble", "ensemble")] >= best_single - 0.005
