"""Training loop and augmentation; the end-to-end Dice target is a slow test."""
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(__file__)))

import numpy as np
import pytest
import torch

from thalseg.errors import DataError, NumericError
from thalseg.experiments import train_segmenter
from thalseg.losses_metrics import composite_loss, dice_report, label_weights_from_training
from thalseg.models import NetworkSpec, build_model, build_superres_net, segment_case
from thalseg.phantom import PhantomSpec, generate_dataset, split_dataset
from thalseg.training import (
    AugmentationPolicy,
    OptimizerConfig,
    SegmentationTask,
    augment,
    make_task,
    train,
)


def _tiny_spec(schema, width=4):
    return NetworkSpec(name="dpn", input_channels=2, output_channels=schema.n_labels + 1, width=width,
                       modalities=("T1", "WMn"), dropout_rate=0.0)


def test_zero_epochs_returns_unchanged_copy(small_cases, schema):
    model = build_model(_tiny_spec(schema))
    task = make_task(model, schema, label_weights_from_training(small_cases))
    out = train(model, small_cases, task, OptimizerConfig(epochs=0))
    assert out is not model
    assert not out.is_trained
    for k, v in model.weights.items():
        assert torch.equal(v, out.weights[k])


def test_short_training_logs_every_epoch_and_leaves_input_untouched(small_cases, schema):
    model = build_model(_tiny_spec(schema))
    before = {k: v.clone() for k, v in model.weights.items()}
    task = make_task(model, schema, label_weights_from_training(small_cases))
    out = train(model, small_cases[:4], task, OptimizerConfig(epochs=2, steps_per_epoch=2), seed=1,
                validation=small_cases[4:])
    assert out.is_trained
    assert [e.epoch for e in out.training_log] == [1, 2]
    assert all(e.val_dice is not None and 0.0 <= e.val_dice <= 1.0 for e in out.training_log)
    for k, v in model.weights.items():
        assert torch.equal(v, before[k])


def test_training_is_seeded(small_cases, schema):
    weights = label_weights_from_training(small_cases)
    runs = []
    for _ in range(2):
        torch.manual_seed(0)
        model = build_model(_tiny_spec(schema))
        out = train(model, small_cases, make_task(model, schema, weights),
                    OptimizerConfig(epochs=1, steps_per_epoch=2), seed=5)
        runs.append(out.training_log[0].loss)
    assert runs[0] == pytest.approx(runs[1], rel=1e-6)


def test_non_finite_loss_aborts_with_context(small_cases, schema):
    model = build_model(_tiny_spec(schema))
    task = make_task(model, schema, label_weights_from_training(small_cases))
    task.loss = lambda module, x, y: module(x).sum() * float("nan")
    with pytest.raises(NumericError) as info:
        train(model, small_cases, task, OptimizerConfig(epochs=1, steps_per_epoch=1))
    assert info.value.epoch == 1
    assert info.value.step == 0


def test_segmentation_task_needs_labels_and_matching_outputs(small_cases, schema):
    spec = _tiny_spec(schema)
    weights = label_weights_from_training(small_cases)
    with pytest.raises(DataError):
        SegmentationTask(spec.model_copy(update={"output_channels": 3}), schema, weights)
    task = SegmentationTask(spec, schema, weights)
    with pytest.raises(DataError):
        task.sample(small_cases[0].with_labels(None), np.random.default_rng(0), AugmentationPolicy.none())


def test_segmentation_loss_is_the_composite_loss(small_cases, schema):
    spec = _tiny_spec(schema)
    weights = label_weights_from_training(small_cases)
    task = SegmentationTask(spec, schema, weights)
    x, y = task.sample(small_cases[0], np.random.default_rng(0), AugmentationPolicy.none())
    x, y = torch.from_numpy(x)[None].float(), torch.from_numpy(y)[None]
    module = build_model(spec).module.eval()
    with torch.no_grad():
        expected = float(composite_loss(y, module(x), weights))
        assert float(task.loss(module, x, y)) == pytest.approx(expected, rel=1e-6)


def test_augment_keeps_labels_in_schema(small_cases, schema):
    case = small_cases[0]
    x = case.stack(["T1", "WMn"])
    policy = AugmentationPolicy(probability=1.0)
    out, _, labels = augment(x, policy, np.random.default_rng(3), labels=case.labels.data)
    assert out.shape == x.shape
    assert labels.shape == case.labels.data.shape
    assert set(np.unique(labels)) <= set([0] + schema.ids)
    same, _, same_labels = augment(x, AugmentationPolicy.none(), np.random.default_rng(3), labels=case.labels.data)
    assert same is x and same_labels is case.labels.data


def test_helper_tasks_train_one_step(small_cases):
    model = build_superres_net(2, width=2, n_blocks=1)
    out = train(model, small_cases, make_task(model), OptimizerConfig(epochs=1, steps_per_epoch=1))
    assert out.is_trained
    assert np.isfinite(out.training_log[0].loss)


@pytest.mark.slow
def test_dpn_reaches_target_dice_on_phantoms():
    spec = PhantomSpec(grid=(48, 48, 48), n_nuclei=6, seed=0)
    cases = generate_dataset(spec, 40, base_seed=0, workers=4)
    train_cases, val_cases, test_cases = split_dataset(cases, (0.8, 0.1, 0.1))
    weights = label_weights_from_training(train_cases)
    net = NetworkSpec(name="dpn", input_channels=2, output_channels=spec.n_nuclei + 1, width=16,
                      modalities=("T1", "WMn"), dropout_rate=0.1)
    model = train_segmenter(net, train_cases, val_cases, spec.schema, weights,
                            OptimizerConfig(epochs=60, steps_per_epoch=50), AugmentationPolicy.none(), seed=0)
    scores = [dice_report(segment_case([model], c, spec.schema), c.labels).mean for c in test_cases]
    assert float(np.mean(scores)) >= 0.85
    first = model.training_log[0].loss
    best = min(e.loss for e in model.training_log)
    assert best < first
