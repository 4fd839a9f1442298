"""Embedding, incorporation schedule, mixing and the resumable curriculum."""
import sys
import os
sys.path.append(os.path.dirname(os.path.dirname(__file__)))

import numpy as np
import pytest

from thalseg.curriculum import (
    CurriculumConfig,
    CurriculumState,
    EmbeddingIndex,
    MixingPolicy,
    MixingSampler,
    embed_all,
    project_2d,
    pseudo_label,
    rank_and_batch,
    run_curriculum,
)
from thalseg.errors import DataError
from thalseg.losses_metrics import label_weights_from_training
from thalseg.models import NetworkSpec, build_autoencoder, build_model
from thalseg.phantom import PhantomSpec, generate_dataset, generate_shifted_pool, split_dataset
from thalseg.training import AugmentationPolicy, OptimizerConfig, make_task, train


def _index(coords, labeled):
    n = len(coords)
    coords = np.asarray(coords, dtype=np.float64)
    return EmbeddingIndex([f"c{i}" for i in range(n)], coords.copy(), coords, np.asarray(labeled, dtype=bool))


def test_schedule_covers_pool_exactly_once():
    rng = np.random.default_rng(0)
    n_seed, n_pool = 50, 9712
    coords = rng.normal(size=(n_seed + n_pool, 2))
    index = _index(coords, [True] * n_seed + [False] * n_pool)
    batches = rank_and_batch(index, batch_size=197, k=50, chaining=False)
    assert len(batches) == 50
    assert [len(b) for b in batches[:49]] == [197] * 49
    assert len(batches[-1]) == 59
    flat = [i for b in batches for i in b]
    assert sorted(flat) == list(range(n_seed, n_seed + n_pool))


def test_chained_schedule_covers_pool_exactly_once():
    rng = np.random.default_rng(1)
    coords = rng.normal(size=(130, 2))
    index = _index(coords, [True] * 10 + [False] * 120)
    batches = rank_and_batch(index, batch_size=25, k=5)
    assert [len(b) for b in batches] == [25, 25, 25, 25, 20]
    flat = [i for b in batches for i in b]
    assert sorted(flat) == list(range(10, 130))


def test_coincident_case_goes_first():
    coords = [[0.0, 0.0], [5.0, 5.0], [0.0, 0.0], [9.0, 9.0]]
    batches = rank_and_batch(_index(coords, [True, False, False, False]), batch_size=1, k=1)
    assert batches[0] == [2]


def test_two_clusters_incorporate_near_cluster_first():
    rng = np.random.default_rng(2)
    a = rng.normal(0.0, 0.3, size=(30, 2))
    b = rng.normal(20.0, 0.3, size=(30, 2))
    coords = np.vstack([a[:3], a[3:], b])
    labeled = [True] * 3 + [False] * 57
    batches = rank_and_batch(_index(coords, labeled), batch_size=9, k=3)
    order = [i for batch in batches for i in batch]
    cluster_a = set(range(3, 30))
    assert set(order[:27]) == cluster_a
    # batches move outward from the seed set under frozen coordinates
    seeds = coords[:3]
    nearest = [min(np.linalg.norm(coords[i] - s) for i in batch for s in seeds) for batch in batches]
    assert nearest[0] <= nearest[-1]


def test_rank_needs_labeled_and_unlabeled():
    with pytest.raises(DataError):
        rank_and_batch(_index([[0, 0], [1, 1]], [False, False]))
    with pytest.raises(DataError):
        rank_and_batch(_index([[0, 0], [1, 1]], [True, True]))


def test_projection_is_seeded_and_separates_clusters():
    rng = np.random.default_rng(3)
    latents = np.vstack([rng.normal(0, 0.1, (20, 8)), rng.normal(5, 0.1, (20, 8))])
    a = project_2d(latents, "pca", seed=0)
    b = project_2d(latents, "pca", seed=0)
    assert np.array_equal(a, b)
    ca, cb = a[:20].mean(axis=0), a[20:].mean(axis=0)
    ra = np.linalg.norm(a[:20] - ca, axis=1).mean()
    rb = np.linalg.norm(a[20:] - cb, axis=1).mean()
    assert np.linalg.norm(ca - cb) > max(ra, rb)
    with pytest.raises(DataError):
        project_2d(latents, "tsne")


def test_embedding_needs_trained_autoencoder(small_cases):
    with pytest.raises(DataError):
        embed_all(small_cases, build_autoencoder(4, width=2), [])


def test_embedding_index_round_trip(tmp_path):
    index = _index([[0, 1], [2, 3], [4, 5]], [True, False, False])
    back = EmbeddingIndex.load(index.save(str(tmp_path / "embedding.npz")))
    assert back.case_ids == index.case_ids
    assert np.array_equal(back.coords, index.coords)
    assert np.array_equal(back.labeled, index.labeled)


def test_mixing_frequencies_match_policy(small_cases):
    policy = MixingPolicy()
    sampler = MixingSampler({"seed": small_cases[:2], "new": small_cases[2:4], "old": small_cases[4:]},
                            policy.probabilities(2))
    rng = np.random.default_rng(4)
    n = 20000
    for _ in range(n):
        sampler.draw(rng)
    for name, p in policy.later.items():
        se = np.sqrt(p * (1 - p) / n)
        assert abs(sampler.counts[name] / n - p) <= 3 * se


def test_first_iteration_mix_and_empty_sources(small_cases):
    policy = MixingPolicy()
    assert policy.probabilities(1) == {"seed": 0.5, "new": 0.5}
    sampler = MixingSampler({"seed": small_cases, "new": [], "old": []}, policy.probabilities(3))
    assert sampler.names == ["seed"]
    with pytest.raises(ValueError):
        MixingPolicy(first={"seed": 0.7, "new": 0.7})


def test_pseudo_labels_of_identical_ensemble(small_cases, schema):
    spec = NetworkSpec(name="dpn", input_channels=2, output_channels=schema.n_labels + 1, width=2,
                       modalities=("T1", "WMn"))
    model = build_model(spec)
    single = pseudo_label(small_cases[:2], [model], schema)
    double = pseudo_label(small_cases[:2], [model, model.copy()], schema)
    for (case, a), (_, b) in zip(single, double):
        assert np.array_equal(a.data, b.data)
        assert case.meta.pseudo_label
    with pytest.raises(DataError):
        pseudo_label(small_cases[:1], [model], schema, shape=(8, 8, 8))


def test_state_overlap_is_detected():
    state = CurriculumState(incorporated=["a"], remaining=["a", "b"], seed_ids=["s"])
    with pytest.raises(DataError):
        state.check()


def _tiny_setup(small_cases, schema):
    spec = NetworkSpec(name="dpn", input_channels=2, output_channels=schema.n_labels + 1, width=2,
                       modalities=("T1", "WMn"), dropout_rate=0.0)
    model = build_model(spec)
    weights = label_weights_from_training(small_cases)
    model = train(model, small_cases, make_task(model, schema, weights), OptimizerConfig(epochs=1, steps_per_epoch=1))
    return model, weights


def test_zero_iterations_returns_initial_ensemble(small_cases, schema):
    model, weights = _tiny_setup(small_cases, schema)
    config = CurriculumConfig(iterations=0)
    state, ensemble = run_curriculum(small_cases[:2], small_cases[2:], [model], None, config, schema, weights)
    assert state.iteration == 0
    for k, v in model.weights.items():
        assert (v == ensemble[0].weights[k]).all()


def test_curriculum_resumes_and_incorporates_once(tmp_path, small_spec, small_cases, schema):
    model, weights = _tiny_setup(small_cases, schema)
    seed_set = small_cases[:2]
    pool = generate_shifted_pool(small_spec, 6, base_seed=1)
    ids = [c.meta.case_id for c in seed_set + pool]
    coords = np.arange(2 * len(ids), dtype=np.float64).reshape(-1, 2)
    index = EmbeddingIndex(ids, coords, coords, np.array([True, True] + [False] * 6))
    config = CurriculumConfig(iterations=3, batch_size=2, k=1,
                              finetune=OptimizerConfig(epochs=1, steps_per_epoch=1),
                              augmentation=AugmentationPolicy.none())
    state_dir = str(tmp_path / "curriculum")

    state, _ = run_curriculum(seed_set, pool, [model], None, config, schema, weights, state_dir=state_dir,
                              index=index, stop_after=1)
    assert state.iteration == 1
    assert len(state.incorporated) == 2
    assert os.path.exists(os.path.join(state_dir, "state.json"))

    state, ensemble = run_curriculum(seed_set, pool, [model], None, config, schema, weights,
                                     state_dir=state_dir, seed_test=small_cases[2:3], index=index)
    assert state.iteration == 3
    assert sorted(state.incorporated) == sorted(c.meta.case_id for c in pool)
    assert len(set(state.incorporated)) == len(state.incorporated)
    assert state.remaining == []
    assert len(ensemble) == 1
    assert all(os.path.exists(p) for p in state.pseudo_labels.values())
    assert CurriculumState.load(state_dir).iteration == 3
    assert "seed_dice" in state.metrics[-1]


@pytest.mark.slow
def test_curriculum_improves_shifted_domain():
    spec = PhantomSpec(grid=(48, 48, 48), n_nuclei=6, seed=0)
    cases = generate_dataset(spec, 30, base_seed=0, workers=4)
    seed_set, _, seed_test = split_dataset(cases, (0.8, 0.0, 0.2))
    pool = generate_shifted_pool(spec, 70, base_seed=0)
    pool, monitor = pool[:60], pool[60:]
    weights = label_weights_from_training(seed_set)
    net = NetworkSpec(name="dpn", input_channels=2, output_channels=spec.n_nuclei + 1, width=16,
                      modalities=("T1", "WMn"), dropout_rate=0.1)
    model = build_model(net)
    model = train(model, seed_set, make_task(model, spec.schema, weights),
                  OptimizerConfig(epochs=40, steps_per_epoch=25), seed=0)
    ae = build_autoencoder(16, width=4)
    ae = train(ae, seed_set + pool, make_task(ae), OptimizerConfig(epochs=10, steps_per_epoch=20), seed=0)
    config = CurriculumConfig(iterations=6, batch_size=10, k=10, reducer="pca",
                              finetune=OptimizerConfig(epochs=3, steps_per_epoch=20))
    state, _ = run_curriculum(seed_set, pool, [model], ae, config, spec.schema, weights,
                              seed_test=seed_test, monitor=monitor)
    before, after = state.metrics[0], state.metrics[-1]
    assert after["seed_dice"] >= before["seed_dice"] - 0.02
    assert after["shifted_dice"] > before["shifted_dice"]
