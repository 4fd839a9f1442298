"""Training loss, overlap metrics and the paired significance test.

Functions:
- label_weights_from_training(cases): inverse mean label volume per structure
- gdl / bce / composite_loss: log(GDL + BCE + eps) on probability tensors
- dice / dice_report / summarize_reports: Dice per label, mean, whole thalamus
- wilcoxon_signed_rank(x, y): two-sided paired test (scipy)

Probability tensors are (C, ...) or (N, C, ...) with the background channel
first. The background channel takes part in BCE but not in GDL.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch
from scipy import stats

from .errors import DataError, VolumeError
from .volumes import THALAMUS_MEAN_VOXELS, CaseBundle, LabelMap, LabelSchema

logger = logging.getLogger(__name__)

EPS = 1e-7
WHOLE_THALAMUS = "Whole thalamus"
AVERAGE = "Average"


@dataclass(frozen=True)
class LabelWeights:
    """Per-structure GDL weights for ids 1..n (background is never weighted)."""

    weights: np.ndarray
    exclude_background: bool = True

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 1 or w.size == 0:
            raise DataError("label weights must be a non-empty vector")
        if not np.all(np.isfinite(w)) or np.any(w <= 0):
            raise DataError("label weights must be finite and positive")
        object.__setattr__(self, "weights", w)

    @property
    def n_labels(self) -> int:
        return int(self.weights.size)

    def as_tensor(self, like: torch.Tensor) -> torch.Tensor:
        return torch.as_tensor(self.weights, dtype=like.dtype, device=like.device)

    @classmethod
    def uniform(cls, n_labels: int) -> "LabelWeights":
        return cls(np.ones(n_labels))


def reference_label_weights(schema: LabelSchema) -> LabelWeights:
    """Weights from the library's published mean structure sizes."""
    return LabelWeights(np.array([1.0 / THALAMUS_MEAN_VOXELS[i] for i in schema.ids]))


def label_weights_from_training(dataset: Iterable[Union[CaseBundle, LabelMap]]) -> LabelWeights:
    maps = [c.labels if isinstance(c, CaseBundle) else c for c in dataset]
    maps = [m for m in maps if m is not None]
    if not maps:
        raise DataError("label weights need at least one labeled case")
    schema = maps[0].schema
    if any(m.schema != schema for m in maps):
        raise DataError("training cases use different label schemas")
    totals = np.zeros(schema.n_labels)
    for m in maps:
        counts = m.counts()
        totals += np.array([counts[i] for i in schema.ids], dtype=np.float64)
    missing = [schema.name(i) for i, t in zip(schema.ids, totals) if t == 0]
    if missing:
        raise DataError(f"labels absent from every training case: {', '.join(missing)}")
    return LabelWeights(len(maps) / totals)


def _channel_dim(t: torch.Tensor) -> int:
    return 1 if t.dim() == 5 else 0


def _check_pair(y: torch.Tensor, p: torch.Tensor) -> None:
    if y.shape != p.shape:
        raise DataError(f"y and p shapes differ: {tuple(y.shape)} vs {tuple(p.shape)}")


def _per_channel_sums(t: torch.Tensor) -> torch.Tensor:
    cdim = _channel_dim(t)
    moved = t.movedim(cdim, 0)
    return moved.reshape(moved.shape[0], -1).sum(dim=1)


def gdl(y: torch.Tensor, p: torch.Tensor, w: LabelWeights) -> torch.Tensor:
    """1 - 2 sum_l w_l sum_x y p / sum_l w_l sum_x (y + p), foreground only."""
    _check_pair(y, p)
    n_channels = y.shape[_channel_dim(y)]
    if w.n_labels != n_channels - 1:
        raise DataError(f"{w.n_labels} weights for {n_channels - 1} foreground channels")
    weights = w.as_tensor(p)
    inter = _per_channel_sums(y * p)[1:]
    total = _per_channel_sums(y + p)[1:]
    den = (weights * total).sum()
    if float(den.detach()) == 0.0:
        return p.sum() * 0.0
    return 1.0 - 2.0 * (weights * inter).sum() / den


def bce(y: torch.Tensor, p: torch.Tensor, eps: float = EPS) -> torch.Tensor:
    """Mean binary cross entropy over voxels and channels."""
    _check_pair(y, p)
    log_p = torch.log(p.clamp_min(eps))
    log_q = torch.log((1.0 - p).clamp_min(eps))
    return -(y * log_p + (1.0 - y) * log_q).mean()


def combine_terms(gdl_value, bce_value, eps: float = EPS):
    if eps <= 0:
        raise DataError("eps must be positive")
    if isinstance(gdl_value, torch.Tensor) or isinstance(bce_value, torch.Tensor):
        return torch.log(gdl_value + bce_value + eps)
    return float(np.log(gdl_value + bce_value + eps))


def composite_loss(y: torch.Tensor, p: torch.Tensor, w: LabelWeights, eps: float = EPS) -> torch.Tensor:
    return combine_terms(gdl(y, p, w), bce(y, p, eps), eps)


class CompositeLoss(torch.nn.Module):
    """Module wrapper used by the training loop."""

    def __init__(self, weights: LabelWeights, eps: float = EPS):
        super().__init__()
        self.weights = weights
        self.eps = eps

    def forward(self, p: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
        return composite_loss(y, p, self.weights, self.eps)


def _check_maps(a: LabelMap, b: LabelMap) -> None:
    if a.schema != b.schema:
        raise DataError(f"label schemas differ ({a.schema.n_labels} vs {b.schema.n_labels} labels)")
    if a.shape != b.shape:
        raise VolumeError(f"label maps have different shapes: {a.shape} vs {b.shape}")


def _dice_masks(a: np.ndarray, b: np.ndarray) -> float:
    size = int(a.sum()) + int(b.sum())
    if size == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / size


def dice(a: LabelMap, b: LabelMap, label: int) -> float:
    _check_maps(a, b)
    if label not in a.schema.ids:
        raise DataError(f"label {label} is not in the schema")
    return _dice_masks(a.data == label, b.data == label)


@dataclass
class DiceReport:
    per_label: Dict[str, float]
    mean: float
    whole: float

    def as_dict(self) -> Dict[str, float]:
        out = dict(self.per_label)
        out[AVERAGE] = self.mean
        out[WHOLE_THALAMUS] = self.whole
        return out

    def to_frame(self) -> pd.DataFrame:
        d = self.as_dict()
        return pd.DataFrame({"structure": list(d), "dice": list(d.values())})


def dice_report(a: LabelMap, b: LabelMap) -> DiceReport:
    """Per-label Dice, their unweighted mean, and whole-thalamus Dice.

    The mean covers the schema labels only; whole-thalamus Dice is reported
    separately and is not averaged in.
    """
    _check_maps(a, b)
    per_label = {name: _dice_masks(a.data == i, b.data == i) for i, name in a.schema.entries}
    whole = _dice_masks(a.data > 0, b.data > 0)
    return DiceReport(per_label, float(np.mean(list(per_label.values()))), whole)


def summarize_reports(reports: Sequence[DiceReport]) -> pd.DataFrame:
    """Mean and std of each row across test cases."""
    if not reports:
        raise DataError("no Dice reports to summarize")
    frame = pd.DataFrame([r.as_dict() for r in reports])
    return pd.DataFrame({
        "structure": frame.columns,
        "mean": frame.mean(axis=0).to_numpy(),
        "std": frame.std(axis=0, ddof=0).to_numpy(),
    })


@dataclass(frozen=True)
class WilcoxonResult:
    statistic: float
    p_value: float
    n: int
    method: str


EXACT_MAX_N = 20


def _exact_signed_rank_p(d: np.ndarray) -> Tuple[float, float]:
    """Statistic min(W+, W-) and its exact two-sided p-value.

    Tied magnitudes get mid-ranks; doubling them keeps every rank integral, so
    the null distribution of 2 W+ is a convolution over the 2^n sign choices.
    """
    ranks2 = np.rint(2.0 * stats.rankdata(np.abs(d))).astype(np.int64)
    total = int(ranks2.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in ranks2:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: total + 1 - r]
        counts = counts + shifted
    w_plus2 = int(ranks2[d > 0].sum())
    w_min2 = min(w_plus2, total - w_plus2)
    p = 2.0 * counts[: w_min2 + 1].sum() / float(2 ** d.size)
    return w_min2 / 2.0, min(1.0, p)


def wilcoxon_signed_rank(x: Sequence[float], y: Sequence[float]) -> WilcoxonResult:
    """Two-sided Wilcoxon signed-rank test for related samples.

    Zero differences are dropped first. Exact null distribution for n <= 20
    (mid-ranks when magnitudes tie), normal approximation with tie-corrected
    variance above that.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DataError(f"paired samples must be equal-length vectors, got {x.shape} and {y.shape}")
    d = x - y
    d = d[d != 0]
    if d.size == 0:
        raise DataError("all paired differences are zero")
    if d.size < 5:
        raise DataError(f"need at least 5 nonzero paired differences, got {d.size}")
    if d.size <= EXACT_MAX_N:
        statistic, p = _exact_signed_rank_p(d)
        return WilcoxonResult(statistic, p, int(d.size), "exact")
    res = stats.wilcoxon(d, zero_method="wilcox", correction=False, alternative="two-sided", method="approx")
    return WilcoxonResult(float(res.statistic), float(res.pvalue), int(d.size), "approx")
