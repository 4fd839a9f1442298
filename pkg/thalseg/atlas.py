"""Subject-specific atlas priors.

select the most similar library cases by normalized cross-correlation,
register each to the target with the deformable registration net, then fuse
the warped labels by local weighted majority voting. The fused hard-label
map is handed to the segmentation net as one extra input channel.
"""
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import Field
from scipy import ndimage

from .base import StrictModel
from .errors import DataError
from .models import ATLAS_CHANNEL, TrainedModel, network_multiple, pad_array, unpad_array
from .networks import SpatialTransformer
from .volumes import CaseBundle, LabelMap, Volume3D, zscore_array

logger = logging.getLogger(__name__)


class FusionParams(StrictModel):
    h: float = Field(0.5, gt=0)
    radius: int = Field(1, ge=0)


@dataclass
class AtlasEntry:
    case_id: str
    image: Volume3D
    labels: LabelMap
    zscored: np.ndarray = field(repr=False, default=None)


class AtlasLibrary:
    """Labeled crops sharing one geometry, with cached z-scored intensities."""

    def __init__(self, entries: Sequence[Tuple[str, Volume3D, LabelMap]]):
        if not entries:
            raise DataError("an atlas library needs at least one case")
        shape = entries[0][1].shape
        self.entries: List[AtlasEntry] = []
        for case_id, image, labels in entries:
            if image.shape != shape or labels.shape != shape:
                raise DataError(f"library case {case_id} does not share the library geometry {shape}")
            self.entries.append(AtlasEntry(case_id, image, labels, zscore_array(image.data).astype(np.float64)))

    @classmethod
    def from_cases(cls, cases: Sequence[CaseBundle], modality: str = "T1") -> "AtlasLibrary":
        return cls([(c.meta.case_id, c.modalities[modality], c.labels) for c in cases if c.labels is not None])

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def shape(self):
        return self.entries[0].image.shape


@dataclass
class AtlasPrior:
    labels: LabelMap
    provenance: Dict = field(default_factory=dict)

    def as_volume(self) -> Volume3D:
        lm = self.labels
        return Volume3D(lm.data.astype(np.float32), lm.spacing, lm.space, lm.side, dict(self.provenance))


def ncc(a: np.ndarray, b: np.ndarray, standardized: bool = False) -> float:
    """Normalized cross-correlation of two arrays (0 if either is constant).

    With `standardized=True` both inputs are taken as already z-scored.
    """
    if not standardized:
        a, b = zscore_array(a).astype(np.float64), zscore_array(b).astype(np.float64)
    return float(np.mean(a * b))


def similarity_scores(lib: AtlasLibrary, target: Volume3D) -> np.ndarray:
    if target.shape != lib.shape:
        raise DataError(f"target shape {target.shape} differs from library shape {lib.shape}")
    t = zscore_array(target.data).astype(np.float64)
    return np.array([ncc(e.zscored, t, standardized=True) for e in lib.entries])


def select_similar(lib: AtlasLibrary, target: Volume3D, n: int = 20, exclude_id: Optional[str] = None) -> List[int]:
    """Indices of the n most similar library images, best first, ties by index."""
    scores = similarity_scores(lib, target)
    candidates = [i for i, e in enumerate(lib.entries) if e.case_id != exclude_id]
    if len(candidates) < n:
        logger.warning("atlas library has %d usable cases, fewer than the %d requested; using all",
                       len(candidates), n)
    ranked = sorted(candidates, key=lambda i: (-scores[i], i))
    return ranked[:n]


def _vote_weights(image: Volume3D, z_target: np.ndarray, params: FusionParams) -> np.ndarray:
    diff = zscore_array(image.data).astype(np.float64) - z_target
    w = np.exp(-(diff ** 2) / params.h ** 2)
    if params.radius > 0:
        size = 2 * params.radius + 1
        w = ndimage.uniform_filter(w, size=size, mode="nearest") * size ** 3
    return np.maximum(w, np.finfo(np.float64).tiny)


def fuse_labels(warped: Sequence[Tuple[Volume3D, LabelMap]], target: Volume3D,
                params: Optional[FusionParams] = None) -> AtlasPrior:
    """Local weighted majority vote; argmax ties go to the lowest label id.

    Contributions are sorted along the case axis before summation so the
    result does not depend on the order of `warped`.
    """
    params = params or FusionParams()
    if not warped:
        raise DataError("label fusion needs at least one warped case")
    schema = warped[0][1].schema
    for image, labels in warped:
        if image.shape != target.shape or labels.shape != target.shape:
            raise DataError(f"warped case shape {labels.shape} differs from target {target.shape}")
        if labels.schema != schema:
            raise DataError("warped cases use different label schemas")
    z_target = zscore_array(target.data).astype(np.float64)
    weights = np.stack([_vote_weights(image, z_target, params) for image, _ in warped])
    labels = np.stack([lm.data for _, lm in warped])
    votes = np.empty((schema.n_labels + 1,) + target.shape)
    for label in range(schema.n_labels + 1):
        contrib = np.where(labels == label, weights, 0.0)
        votes[label] = np.sort(contrib, axis=0).sum(axis=0)
    fused = np.argmax(votes, axis=0).astype(np.int16)
    out = LabelMap(fused, schema, target.spacing, target.space, target.side)
    return AtlasPrior(out, {"fusion_h": params.h, "fusion_radius": params.radius, "n_cases": len(warped)})


def _warp(transformer, data: np.ndarray, flow: torch.Tensor, mode: str) -> np.ndarray:
    transformer.mode = mode
    src = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))[None, None].to(flow.device)
    return transformer(src, flow)[0, 0].cpu().numpy()


@torch.no_grad()
def register_pair(reg_model: Optional[TrainedModel], moving: Volume3D, moving_labels: LabelMap,
                  fixed: Volume3D) -> Tuple[Volume3D, LabelMap, float]:
    """Warp a library case onto the target; returns image, labels, mean |flow|."""
    if moving.shape != fixed.shape:
        raise DataError(f"moving {moving.shape} and fixed {fixed.shape} differ in shape")
    if reg_model is None:
        return moving, moving_labels, 0.0
    pair = np.stack([zscore_array(moving.data), zscore_array(fixed.data)])
    padded, after = pad_array(pair, network_multiple(reg_model))
    reg_model.module.eval()
    x = torch.from_numpy(padded)[None].to(reg_model.device)
    flow = reg_model.module(x[:, :1], x[:, 1:])
    transformer = SpatialTransformer()
    image = unpad_array(_warp(transformer, pad_array(moving.data, network_multiple(reg_model))[0], flow, "bilinear"), after)
    labels = unpad_array(_warp(transformer, pad_array(moving_labels.data, network_multiple(reg_model))[0], flow, "nearest"), after)
    magnitude = float(flow.norm(dim=1).mean())
    warped_image = Volume3D(image, fixed.spacing, fixed.space, fixed.side)
    warped_labels = LabelMap(np.rint(labels).astype(np.int16), moving_labels.schema, fixed.spacing, fixed.space, fixed.side)
    return warped_image, warped_labels, magnitude


def build_subject_atlas(lib: AtlasLibrary, target: Volume3D, reg_model: Optional[TrainedModel], n: int = 20,
                        params: Optional[FusionParams] = None, exclude_id: Optional[str] = None,
                        workers: int = 1) -> AtlasPrior:
    start = time.perf_counter()
    params = params or FusionParams()
    if reg_model is not None and not reg_model.is_trained:
        logger.warning("registration net is untrained; library cases are fused unregistered")
    selected = select_similar(lib, target, n, exclude_id)

    def register(i):
        e = lib.entries[i]
        return register_pair(reg_model, e.image, e.labels, target)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(register, selected))
    else:
        results = [register(i) for i in selected]
    prior = fuse_labels([(img, lm) for img, lm, _ in results], target, params)
    prior.provenance.update({
        "selected": [lib.entries[i].case_id for i in selected],
        "mean_flow": [round(m, 6) for _, _, m in results],
        "seconds": round(time.perf_counter() - start, 3),
    })
    logger.info("atlas prior from %d cases in %.2fs", len(selected), prior.provenance["seconds"])
    return prior


def prior_channel(case: CaseBundle, prior: AtlasPrior) -> CaseBundle:
    return case.with_modality(ATLAS_CHANNEL, prior.as_volume())


def attach_priors(cases: Sequence[CaseBundle], lib: AtlasLibrary, reg_model: Optional[TrainedModel],
                  n: int = 20, params: Optional[FusionParams] = None, modality: str = "T1",
                  leave_self_out: bool = True) -> List[CaseBundle]:
    """Every case with its own atlas prior as an extra modality."""
    out = []
    for case in cases:
        exclude = case.meta.case_id if leave_self_out else None
        prior = build_subject_atlas(lib, case.modalities[modality], reg_model, n, params, exclude)
        out.append(prior_channel(case, prior))
    return out
