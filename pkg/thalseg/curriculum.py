"""Incremental semi-supervised curriculum.

Cases are embedded with the autoencoder, projected to 2-D, and the unlabeled
pool is incorporated in batches ordered by proximity to what is already
labeled. Each batch is pseudo-labeled by the current ensemble, then every
member is fine-tuned on a mix of seed, new and previously incorporated cases.

State (iteration, schedule, pseudo-labels, checkpoints, metrics) is written
after every iteration so an interrupted run resumes where it stopped.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import Field, field_validator
from sklearn.decomposition import PCA
from sklearn.neighbors import NearestNeighbors

from .base import StrictModel, derive_seed
from .errors import CurriculumHalted, DataError, NumericError
from .losses_metrics import LabelWeights, dice_report
from .models import TrainedModel, case_inputs, ensemble_proba, labels_from_proba, load_checkpoint, save_checkpoint
from .training import AugmentationPolicy, OptimizerConfig, SegmentationTask, train
from .volume_io import load_labels, save_volume
from .volumes import CaseBundle, LabelMap, LabelSchema

logger = logging.getLogger(__name__)

STATE_FILE = "state.json"
EMBEDDING_FILE = "embedding.npz"
METRICS_FILE = "metrics.jsonl"


@dataclass
class EmbeddingIndex:
    case_ids: List[str]
    latents: np.ndarray
    coords: np.ndarray
    labeled: np.ndarray
    sources: List[str] = field(default_factory=list)

    def __post_init__(self):
        n = len(self.case_ids)
        if self.latents.shape[0] != n or self.coords.shape != (n, 2) or self.labeled.shape != (n,):
            raise DataError("embedding index arrays disagree on the number of cases")

    def position(self, case_id: str) -> int:
        return self.case_ids.index(case_id)

    def save(self, path: str) -> str:
        np.savez(path, case_ids=np.array(self.case_ids), latents=self.latents, coords=self.coords,
                 labeled=self.labeled, sources=np.array(self.sources or [""] * len(self.case_ids)))
        return path

    @classmethod
    def load(cls, path: str) -> "EmbeddingIndex":
        blob = np.load(path, allow_pickle=False)
        return cls([str(s) for s in blob["case_ids"]], blob["latents"], blob["coords"], blob["labeled"],
                   [str(s) for s in blob["sources"]])


def project_2d(latents: np.ndarray, method: str = "umap", seed: int = 0) -> np.ndarray:
    """Neighborhood-preserving 2-D projection; PCA when UMAP is unavailable."""
    latents = np.asarray(latents, dtype=np.float64)
    n = latents.shape[0]
    if method == "umap" and n > 3:
        try:
            import umap

            reducer = umap.UMAP(n_components=2, n_neighbors=min(15, n - 1), random_state=seed)
            return np.asarray(reducer.fit_transform(latents), dtype=np.float64)
        except ImportError:
            logger.warning("umap-learn is not installed; projecting with PCA")
    elif method not in ("umap", "pca"):
        raise DataError(f"unknown projection method {method!r}")
    k = min(2, n, latents.shape[1])
    coords = np.zeros((n, 2))
    if k > 0 and n > 1:
        coords[:, :k] = PCA(n_components=k, svd_solver="full").fit_transform(latents)
    return coords


@torch.no_grad()
def encode_cases(cases: Sequence[CaseBundle], autoencoder: TrainedModel) -> np.ndarray:
    autoencoder.module.eval()
    out = []
    for case in cases:
        x = torch.from_numpy(case_inputs(case, autoencoder.spec))[None].to(autoencoder.device)
        out.append(autoencoder.module.encode(x)[0].cpu().numpy().astype(np.float64))
    return np.stack(out)


def embed_all(cases: Sequence[CaseBundle], autoencoder: TrainedModel, labeled_ids: Sequence[str],
              method: str = "umap", seed: int = 0) -> EmbeddingIndex:
    if not autoencoder.is_trained:
        raise DataError("embedding needs a trained autoencoder")
    latents = encode_cases(cases, autoencoder)
    labeled_ids = set(labeled_ids)
    ids = [c.meta.case_id for c in cases]
    if len(set(ids)) != len(ids):
        raise DataError("case ids must be unique for embedding")
    return EmbeddingIndex(
        ids, latents, project_2d(latents, method, seed),
        np.array([i in labeled_ids for i in ids]), [c.meta.source for c in cases],
    )


def _scores(coords: np.ndarray, labeled: Sequence[int], candidates: Sequence[int], k: int) -> np.ndarray:
    nn = NearestNeighbors(n_neighbors=min(k, len(labeled))).fit(coords[list(labeled)])
    dist, _ = nn.kneighbors(coords[list(candidates)])
    return dist.mean(axis=1)


def rank_and_batch(index: EmbeddingIndex, batch_size: int = 197, k: int = 50,
                   chaining: bool = True) -> List[List[int]]:
    """Incorporation schedule: batches of case positions, nearest first.

    Each unlabeled case scores the mean 2-D distance to its k nearest
    labeled points. With chaining, each incorporated batch joins the labeled
    set before the next batch is scored. Ties go to the lower position.
    """
    if batch_size < 1 or k < 1:
        raise DataError("batch_size and k must be >= 1")
    labeled = [int(i) for i in np.flatnonzero(index.labeled)]
    remaining = [int(i) for i in np.flatnonzero(~index.labeled)]
    if not labeled:
        raise DataError("ranking needs at least one labeled case")
    if not remaining:
        raise DataError("no unlabeled cases left to rank")
    batches = []
    if not chaining:
        scores = _scores(index.coords, labeled, remaining, k)
        order = [remaining[j] for j in sorted(range(len(remaining)), key=lambda j: (scores[j], remaining[j]))]
        return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]
    while remaining:
        scores = _scores(index.coords, labeled, remaining, k)
        order = sorted(range(len(remaining)), key=lambda j: (scores[j], remaining[j]))
        batch = [remaining[j] for j in order[:batch_size]]
        batches.append(batch)
        labeled.extend(batch)
        chosen = set(batch)
        remaining = [i for i in remaining if i not in chosen]
    return batches


def pseudo_label(batch: Sequence[CaseBundle], ensemble: Sequence[TrainedModel], schema: LabelSchema,
                 shape: Optional[Tuple[int, int, int]] = None) -> List[Tuple[CaseBundle, LabelMap]]:
    """Argmax of averaged ensemble probabilities, flagged as pseudo-labels."""
    out = []
    for case in batch:
        if shape is not None and case.shape != tuple(shape):
            raise DataError(f"case {case.meta.case_id} has shape {case.shape}, expected {tuple(shape)}")
        labels = labels_from_proba(ensemble_proba(ensemble, case), schema, case.reference)
        out.append((case.with_labels(labels, pseudo=True), labels))
    return out


class MixingPolicy(StrictModel):
    first: Dict[str, float] = Field(default_factory=lambda: {"seed": 0.5, "new": 0.5})
    later: Dict[str, float] = Field(default_factory=lambda: {"seed": 0.5, "new": 0.25, "old": 0.25})

    @field_validator("first", "later")
    @classmethod
    def _sums_to_one(cls, v):
        unknown = set(v) - {"seed", "new", "old"}
        if unknown:
            raise ValueError(f"unknown sources {sorted(unknown)}")
        if any(p < 0 for p in v.values()) or abs(sum(v.values()) - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to 1")
        return v

    def probabilities(self, iteration: int) -> Dict[str, float]:
        return dict(self.first if iteration <= 1 else self.later)


class MixingSampler:
    """Draw a source by policy probability, then a case uniformly within it.

    Sources with no cases are dropped and the rest renormalized.
    """

    def __init__(self, sources: Dict[str, Sequence[CaseBundle]], probabilities: Dict[str, float]):
        self.names = [n for n in ("seed", "new", "old") if probabilities.get(n, 0) > 0 and sources.get(n)]
        if not self.names:
            raise DataError("mixing sampler has no non-empty source")
        p = np.array([probabilities[n] for n in self.names], dtype=np.float64)
        self.p = p / p.sum()
        self.sources = {n: list(sources[n]) for n in self.names}
        self.counts = {n: 0 for n in self.names}

    def draw(self, rng: np.random.Generator) -> CaseBundle:
        name = self.names[int(rng.choice(len(self.names), p=self.p))]
        self.counts[name] += 1
        pool = self.sources[name]
        return pool[int(rng.integers(len(pool)))]


class CurriculumConfig(StrictModel):
    iterations: int = Field(50, ge=0)
    batch_size: int = Field(197, ge=1)
    k: int = Field(50, ge=1)
    chaining: bool = True
    reducer: str = "umap"
    policy: MixingPolicy = Field(default_factory=MixingPolicy)
    finetune: OptimizerConfig = Field(default_factory=lambda: OptimizerConfig(epochs=5, steps_per_epoch=50))
    augmentation: AugmentationPolicy = Field(default_factory=AugmentationPolicy)


@dataclass
class CurriculumState:
    iteration: int = 0
    incorporated: List[str] = field(default_factory=list)
    remaining: List[str] = field(default_factory=list)
    seed_ids: List[str] = field(default_factory=list)
    schedule: List[List[str]] = field(default_factory=list)
    checkpoints: List[str] = field(default_factory=list)
    pseudo_labels: Dict[str, str] = field(default_factory=dict)
    metrics: List[Dict] = field(default_factory=list)

    def check(self) -> None:
        inc, rem, seed = set(self.incorporated), set(self.remaining), set(self.seed_ids)
        if inc & rem or inc & seed or rem & seed or len(inc) != len(self.incorporated):
            raise DataError("curriculum state sets overlap")

    def save(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        path = os.path.join(directory, STATE_FILE)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
        os.replace(tmp, path)
        return path

    @classmethod
    def load(cls, directory: str) -> "CurriculumState":
        path = os.path.join(directory, STATE_FILE)
        if not os.path.exists(path):
            raise DataError(f"no curriculum state in {directory}")
        with open(path, "r", encoding="utf-8") as fh:
            return cls(**json.load(fh))


def _ensemble_dice(ensemble, cases, schema) -> Tuple[float, float]:
    reports = [dice_report(labels_from_proba(ensemble_proba(ensemble, c), schema, c.reference), c.labels)
               for c in cases]
    return float(np.mean([r.mean for r in reports])), float(np.mean([r.whole for r in reports]))


def _evaluate(ensemble, schema, seed_test, monitor) -> Dict:
    row = {}
    if seed_test:
        row["seed_dice"], row["seed_whole_dice"] = _ensemble_dice(ensemble, seed_test, schema)
    if monitor:
        row["shifted_dice"], row["shifted_whole_dice"] = _ensemble_dice(ensemble, monitor, schema)
    return row


def run_curriculum(seed_set: Sequence[CaseBundle], pool: Sequence[CaseBundle], ensemble: Sequence[TrainedModel],
                   autoencoder: Optional[TrainedModel], config: CurriculumConfig, schema: LabelSchema,
                   weights: LabelWeights, seed: int = 0, state_dir: Optional[str] = None,
                   seed_test: Sequence[CaseBundle] = (), monitor: Sequence[CaseBundle] = (),
                   index: Optional[EmbeddingIndex] = None,
                   stop_after: Optional[int] = None) -> Tuple[CurriculumState, List[TrainedModel]]:
    """Run (or resume) the curriculum; returns the final state and ensemble.

    `index` may supply a precomputed embedding; otherwise the autoencoder
    embeds seed and pool cases once and the projection stays frozen.
    `stop_after` ends the call after that many iterations in this call.
    """
    ensemble = [m.copy() for m in ensemble]
    by_id = {c.meta.case_id: c for c in list(seed_set) + list(pool)}
    seed_ids = [c.meta.case_id for c in seed_set]
    state = None
    if state_dir and os.path.exists(os.path.join(state_dir, STATE_FILE)):
        state = CurriculumState.load(state_dir)
        ensemble = [load_checkpoint(p, device=str(ensemble[0].device)) for p in state.checkpoints] or ensemble
        logger.info("resuming curriculum at iteration %d from %s", state.iteration, state_dir)
    if config.iterations == 0 or not pool:
        return state or CurriculumState(seed_ids=seed_ids, remaining=[c.meta.case_id for c in pool]), ensemble

    if state is None:
        if index is None:
            if autoencoder is None:
                raise DataError("curriculum needs an autoencoder or a precomputed embedding")
            index = embed_all(list(seed_set) + list(pool), autoencoder, seed_ids, config.reducer, seed)
        batches = rank_and_batch(index, config.batch_size, config.k, config.chaining)
        schedule = [[index.case_ids[i] for i in b] for b in batches]
        state = CurriculumState(seed_ids=seed_ids, remaining=[c.meta.case_id for c in pool], schedule=schedule)
        state.metrics.append(dict(iteration=0, **_evaluate(ensemble, schema, seed_test, monitor)))
        if state_dir:
            os.makedirs(state_dir, exist_ok=True)
            index.save(os.path.join(state_dir, EMBEDDING_FILE))
            _append_metrics(state_dir, state.metrics[-1])
            state.save(state_dir)

    pseudo: Dict[str, CaseBundle] = {}
    for case_id, path in state.pseudo_labels.items():
        pseudo[case_id] = by_id[case_id].with_labels(load_labels(path, schema), pseudo=True)

    total = min(config.iterations, len(state.schedule))
    done_here = 0
    while state.iteration < total:
        if stop_after is not None and done_here >= stop_after:
            break
        t = state.iteration + 1
        batch_ids = state.schedule[t - 1]
        labeled_batch = pseudo_label([by_id[i] for i in batch_ids], ensemble, schema, seed_set[0].shape)
        new_cases = [c for c, _ in labeled_batch]
        old_cases = [pseudo[i] for i in state.incorporated]
        probs = config.policy.probabilities(t)
        tuned = []
        try:
            for j, member in enumerate(ensemble):
                sampler = MixingSampler({"seed": seed_set, "new": new_cases, "old": old_cases}, probs)
                task = SegmentationTask(member.spec, schema, weights)
                tuned.append(train(member, sampler, task, config.finetune, config.augmentation,
                                   seed=derive_seed(seed, "curriculum", t, j), desc=f"curriculum {t} member {j}"))
        except NumericError as exc:
            path = state.save(state_dir) if state_dir else None
            raise CurriculumHalted(f"iteration {t} failed: {exc}", path) from exc
        ensemble = tuned

        for case in new_cases:
            pseudo[case.meta.case_id] = case
            if state_dir:
                path = os.path.join(state_dir, "pseudo", case.meta.case_id + ".nii.gz")
                state.pseudo_labels[case.meta.case_id] = save_volume(path, case.labels)
        state.incorporated.extend(batch_ids)
        chosen = set(batch_ids)
        state.remaining = [i for i in state.remaining if i not in chosen]
        state.iteration = t
        row = dict(iteration=t, batch=len(batch_ids), **_evaluate(ensemble, schema, seed_test, monitor))
        state.metrics.append(row)
        if state_dir:
            state.checkpoints = [
                save_checkpoint(m, os.path.join(state_dir, "models", f"member{j}.pt")) for j, m in enumerate(ensemble)
            ]
            _append_metrics(state_dir, row)
            state.save(state_dir)
        state.check()
        done_here += 1
        logger.info("curriculum iteration %d/%d: +%d cases, %s", t, total, len(batch_ids),
                    ", ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float)))
    return state, ensemble


def _append_metrics(state_dir: str, row: Dict) -> None:
    with open(os.path.join(state_dir, METRICS_FILE), "a", encoding="utf-8") as fh:
        fh.write(json.dumps(row, sort_keys=True) + "\n")
