"""Deterministic synthetic thalamus phantoms.

Each phantom is a thalamus-shaped super-ellipsoid packed with ellipsoidal
nuclei whose relative sizes follow the mean structure volumes of the labeled
library. With the full 13-label schema, thalamic voxels not claimed by a
nucleus become the Intermediate Space label.

Functions:
- generate_case(spec, case_seed): one CaseBundle with T1, T2, WMn and labels
- generate_dataset(spec, n_cases, base_seed): list of CaseBundle
- split_dataset(cases, ratios): train/val/test partitions
- generate_shifted_pool(spec, n_cases, base_seed): progressively shifted cases
- degrade(case): 2x standard-resolution copy of a case
- generate_head(...): whole-head phantom with both thalami for the pipeline
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from pydantic import Field, field_validator
from scipy import ndimage
from scipy.stats import norm

from .base import StrictModel, derive_seed
from .errors import DataError
from .volumes import (
    THALAMUS_MEAN_VOXELS,
    THALAMUS_SCHEMA,
    CaseBundle,
    CaseMeta,
    CropBox,
    LabelMap,
    Side,
    Space,
    Volume3D,
    avg_pool,
    mirror_lr,
    pad_to_multiple,
    unpad,
    upsample,
)

logger = logging.getLogger(__name__)

MODALITIES = ("T1", "T2", "WMn")
INTERMEDIATE_SPACE = 13
MIN_NUCLEUS_VOXELS = 8
NUCLEI_FILL = 0.55

# Background level and nucleus spread per modality; WMn separates nuclei most.
_BASE_CONTRAST = {
    "T1": (0.78, 0.55, 0.015),
    "T2": (0.35, 0.50, 0.010),
    "WMn": (0.10, 0.30, 0.050),
}


def default_contrast(n_nuclei: int, separation: float = 1.0) -> Dict[str, Dict[int, Tuple[float, float]]]:
    """Contrast table label -> (mean, std) per modality.

    Nuclei ranks differ between modalities so that combining them adds
    information. `separation` scales the spread between nucleus means.
    """
    out = {}
    for i, (modality, (bg, start, step)) in enumerate(_BASE_CONTRAST.items()):
        ranks = np.arange(n_nuclei)
        if modality != "WMn":
            ranks = np.random.default_rng(1000 + i).permutation(n_nuclei)
        table = {0: (bg, 1.0)}
        for label, rank in zip(range(1, n_nuclei + 1), ranks):
            table[label] = (start + separation * step * float(rank), 1.0)
        out[modality] = table
    return out


class PhantomSpec(StrictModel):
    grid: Tuple[int, int, int] = (48, 48, 48)
    n_nuclei: int = Field(13, ge=1, le=13)
    contrast: Optional[Dict[str, Dict[int, Tuple[float, float]]]] = None
    contrast_separation: float = Field(1.0, gt=0)
    noise_sigma: float = Field(0.02, ge=0)
    deform_amplitude: float = Field(1.5, ge=0)
    deform_bandwidth: float = Field(6.0, gt=0)
    intensity_shift: float = Field(0.0, ge=0, le=1)
    scale: float = Field(1.0, gt=0.3, le=1.5)
    centers: Optional[List[Tuple[float, float, float]]] = None
    seed: int = 0

    @field_validator("grid")
    @classmethod
    def _grid_positive(cls, v):
        if any(s < 8 for s in v):
            raise ValueError("every grid dimension must be >= 8")
        return v

    @property
    def schema(self):
        return THALAMUS_SCHEMA.subset(self.n_nuclei)

    def resolved_contrast(self) -> Dict[str, Dict[int, Tuple[float, float]]]:
        table = self.contrast or default_contrast(self.n_nuclei, self.contrast_separation)
        labels = set(range(0, self.n_nuclei + 1))
        for modality in MODALITIES:
            if modality not in table:
                raise DataError(f"contrast table lacks modality {modality}")
            missing = labels - set(table[modality])
            if missing:
                raise DataError(f"contrast for {modality} misses labels {sorted(missing)}")
        if self.intensity_shift:
            table = _shift_contrast(table, self.intensity_shift)
        return table


def _shift_contrast(table, shift: float):
    """Compress nucleus contrast and brighten the background."""
    out = {}
    for modality, entries in table.items():
        nuclei = [m for label, (m, _) in entries.items() if label != 0]
        centre = float(np.mean(nuclei)) if nuclei else 0.0
        shifted = {}
        for label, (mean, std) in entries.items():
            if label == 0:
                shifted[label] = (mean + 0.3 * shift, std)
            else:
                shifted[label] = (centre + (mean - centre) * (1.0 - 0.6 * shift), std)
        out[modality] = shifted
    return out


def _thalamus_mask(grid, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    coords = np.indices(grid, dtype=np.float64)
    centre = np.array([(g - 1) / 2.0 for g in grid]).reshape(3, 1, 1, 1)
    semi = scale * np.array([0.30 * grid[0], 0.36 * grid[1], 0.30 * grid[2]]).reshape(3, 1, 1, 1)
    level = np.sum(np.abs((coords - centre) / semi) ** 2.5, axis=0)
    return level <= 1.0, level


def _nucleus_radii(n_nuclei: int, thalamus_voxels: int) -> Dict[int, np.ndarray]:
    ids = [i for i in range(1, n_nuclei + 1) if i != INTERMEDIATE_SPACE]
    total = sum(THALAMUS_MEAN_VOXELS[i] for i in ids)
    k = NUCLEI_FILL * thalamus_voxels / total
    elong = np.array([1.0, 1.25, 0.9])
    elong = elong / np.cbrt(np.prod(elong))
    radii = {}
    for i in ids:
        r = np.cbrt(3.0 * k * THALAMUS_MEAN_VOXELS[i] / (4.0 * np.pi))
        radii[i] = r * elong
    return radii


def _assign(grid, mask, centers, radii, n_nuclei) -> np.ndarray:
    coords = np.indices(grid, dtype=np.float64)
    ids = sorted(radii)
    dist = np.empty((len(ids),) + tuple(grid))
    for j, i in enumerate(ids):
        c = np.asarray(centers[i]).reshape(3, 1, 1, 1)
        r = radii[i].reshape(3, 1, 1, 1)
        dist[j] = np.sqrt(np.sum(((coords - c) / r) ** 2, axis=0))
    nearest = np.argmin(dist, axis=0)
    best = np.take_along_axis(dist, nearest[None], axis=0)[0]
    labels = np.zeros(grid, dtype=np.int16)
    claimed = mask & (best <= 1.0)
    labels[claimed] = np.asarray(ids, dtype=np.int16)[nearest[claimed]]
    if n_nuclei == INTERMEDIATE_SPACE:
        labels[mask & ~claimed] = INTERMEDIATE_SPACE
    return labels


def _check_centers(centers: Dict[int, np.ndarray]) -> None:
    ids = sorted(centers)
    for a_pos, a in enumerate(ids):
        for b in ids[a_pos + 1:]:
            if np.linalg.norm(centers[a] - centers[b]) < 1.0:
                raise DataError(f"nucleus seeds {a} and {b} overlap at {centers[a].tolist()}")


def _layout(spec: PhantomSpec) -> np.ndarray:
    grid = tuple(spec.grid)
    mask, level = _thalamus_mask(grid, spec.scale)
    radii = _nucleus_radii(spec.n_nuclei, int(mask.sum()))
    ids = sorted(radii, key=lambda i: -THALAMUS_MEAN_VOXELS[i])

    if spec.centers is not None:
        if len(spec.centers) != len(ids):
            raise DataError(f"expected {len(ids)} nucleus seeds, got {len(spec.centers)}")
        centers = {i: np.asarray(c, dtype=np.float64) for i, c in zip(sorted(radii), spec.centers)}
        _check_centers(centers)
        labels = _assign(grid, mask, centers, radii, spec.n_nuclei)
        _check_sizes(labels, ids)
        return labels

    candidates = np.argwhere(level <= 0.7).astype(np.float64)
    rng = np.random.default_rng(derive_seed(spec.seed, "layout"))
    for attempt in range(20):
        centers: Dict[int, np.ndarray] = {}
        spacing = 0.8
        for i in ids:
            for tries in range(400):
                c = candidates[rng.integers(len(candidates))]
                ok = all(
                    np.linalg.norm((c - centers[j])) >= spacing * (radii[i].mean() + radii[j].mean())
                    for j in centers
                )
                if ok:
                    centers[i] = c
                    break
                if tries % 100 == 99:
                    spacing *= 0.9
            else:
                break
        if len(centers) < len(ids):
            continue
        labels = _assign(grid, mask, centers, radii, spec.n_nuclei)
        try:
            _check_sizes(labels, ids)
        except DataError:
            logger.debug("layout attempt %d rejected", attempt)
            continue
        return labels
    raise DataError(f"could not pack {len(ids)} nuclei into grid {grid}")


def _check_sizes(labels: np.ndarray, ids: Sequence[int]) -> None:
    counts = np.bincount(labels.ravel(), minlength=max(ids) + 1)
    small = [i for i in ids if counts[i] < MIN_NUCLEUS_VOXELS]
    if small:
        raise DataError(f"nuclei {small} occupy fewer than {MIN_NUCLEUS_VOXELS} voxels")


@lru_cache(maxsize=32)
def _cached_layout(spec_json: str) -> np.ndarray:
    labels = _layout(PhantomSpec.model_validate_json(spec_json))
    labels.setflags(write=False)
    return labels


def template_labels(spec: PhantomSpec) -> np.ndarray:
    """Undeformed label layout of a spec (shared by all its cases)."""
    layout_fields = spec.model_dump(include={"grid", "n_nuclei", "scale", "centers", "seed"})
    return _cached_layout(PhantomSpec(**layout_fields).model_dump_json())


def smooth_displacement(grid, amplitude: float, bandwidth: float, rng: np.random.Generator) -> np.ndarray:
    """(3, X, Y, Z) smooth random field with max magnitude `amplitude` voxels."""
    field = np.stack([ndimage.gaussian_filter(rng.standard_normal(grid), bandwidth, mode="wrap") for _ in range(3)])
    peak = np.abs(field).max()
    if peak == 0:
        return np.zeros((3,) + tuple(grid))
    return field * (amplitude / peak)


def generate_case(spec: PhantomSpec, case_seed: int, case_id: Optional[str] = None) -> CaseBundle:
    grid = tuple(spec.grid)
    contrast = spec.resolved_contrast()
    labels = np.array(template_labels(spec))
    rng = np.random.default_rng(derive_seed(spec.seed, "case", case_seed))
    if spec.deform_amplitude > 0:
        disp = smooth_displacement(grid, spec.deform_amplitude, spec.deform_bandwidth, rng)
        coords = np.indices(grid, dtype=np.float64) + disp
        labels = ndimage.map_coordinates(labels, coords, order=0, mode="nearest").astype(np.int16)

    modalities = {}
    for modality in MODALITIES:
        table = contrast[modality]
        means = np.array([table[i][0] for i in range(spec.n_nuclei + 1)])
        stds = np.array([table[i][1] for i in range(spec.n_nuclei + 1)])
        data = means[labels]
        if spec.noise_sigma > 0:
            data = data + stds[labels] * spec.noise_sigma * rng.standard_normal(grid)
        modalities[modality] = Volume3D(data, space=Space.CROP, side=Side.LEFT)

    meta = CaseMeta(
        case_id=case_id or f"phantom-{case_seed}",
        side=Side.LEFT,
        age=round(float(rng.uniform(20, 80)), 1),
        sex=str(rng.choice(["F", "M"])),
        source="phantom",
        seed=int(case_seed),
    )
    label_map = LabelMap(labels, spec.schema, space=Space.CROP, side=Side.LEFT)
    return CaseBundle(modalities, label_map, meta)


def generate_dataset(spec: PhantomSpec, n_cases: int, base_seed: int, workers: int = 1) -> List[CaseBundle]:
    if n_cases < 1:
        raise DataError("n_cases must be >= 1")
    template_labels(spec)

    def make(i: int) -> CaseBundle:
        return generate_case(spec, derive_seed(base_seed, i), case_id=f"case{base_seed}-{i:04d}")

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            cases = list(pool.map(make, range(n_cases)))
    else:
        cases = [make(i) for i in range(n_cases)]
    logger.info("generated %d phantom cases (grid %s, %d nuclei)", n_cases, spec.grid, spec.n_nuclei)
    return cases


def split_sizes(n: int, ratios: Sequence[float]) -> Tuple[int, int, int]:
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-6:
        raise DataError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    n_train = int(round(n * ratios[0]))
    n_val = min(int(round(n * ratios[1])), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(cases: Sequence[CaseBundle], ratios: Sequence[float] = (0.8, 0.1, 0.1)):
    n_train, n_val, _ = split_sizes(len(cases), ratios)
    cases = list(cases)
    return cases[:n_train], cases[n_train:n_train + n_val], cases[n_train + n_val:]


def generate_shifted_pool(spec: PhantomSpec, n_cases: int, base_seed: int, max_shift: float = 1.0) -> List[CaseBundle]:
    """Cases whose domain drifts steadily away from `spec` (unlabeled cohort stand-in)."""
    pool = []
    for i in range(n_cases):
        shift = max_shift * (i + 1) / n_cases
        shifted = spec.model_copy(update={"intensity_shift": shift, "scale": spec.scale * (1.0 - 0.15 * shift)})
        case = generate_case(shifted, derive_seed(base_seed, "pool", i), case_id=f"pool{base_seed}-{i:04d}")
        case.meta.source = "shifted"
        pool.append(case)
    return pool


def degrade(case: CaseBundle, factor: int = 2) -> CaseBundle:
    """Standard-resolution copy: average-pool then trilinear upsample back."""
    mods = {}
    for name, v in case.modalities.items():
        padded, record = pad_to_multiple(v, factor, mode="edge")
        low = upsample(avg_pool(padded, factor), factor, kind="trilinear")
        mods[name] = unpad(low, record)
    meta = replace(case.meta, source=case.meta.source + "-lr")
    return CaseBundle(mods, case.labels, meta)


def nearest_mean_accuracy(labels: np.ndarray, table: Dict[int, Tuple[float, float]], noise_sigma: float) -> float:
    """Expected voxelwise accuracy of the nearest-class-mean rule on one modality.

    With equal per-class noise this is the Bayes rule under equal priors; the
    expectation is taken over the noise, weighted by label frequencies.
    """
    present = sorted(int(v) for v in np.unique(labels))
    weights = np.bincount(labels.ravel().astype(np.int64))[present].astype(np.float64)
    weights /= weights.sum()
    means = np.array([table[l][0] for l in present])
    if noise_sigma == 0:
        return 1.0 if len(set(means.tolist())) == len(means) else float("nan")
    order = np.argsort(means, kind="stable")
    sorted_means = means[order]
    acc = 0.0
    for rank, idx in enumerate(order):
        lo = -np.inf if rank == 0 else (sorted_means[rank - 1] + sorted_means[rank]) / 2
        hi = np.inf if rank == len(order) - 1 else (sorted_means[rank] + sorted_means[rank + 1]) / 2
        m = sorted_means[rank]
        acc += weights[idx] * (norm.cdf((hi - m) / noise_sigma) - norm.cdf((lo - m) / noise_sigma))
    return float(acc)


@dataclass
class HeadPhantom:
    t1_hr: Volume3D
    t1_native: Volume3D
    left_labels: LabelMap
    right_labels: LabelMap
    icv_mask: np.ndarray
    left_box: CropBox
    right_box: CropBox

    @property
    def icv_mm3(self) -> float:
        return float(self.icv_mask.sum()) * float(np.prod(self.t1_native.spacing))


def generate_head(spec: PhantomSpec, seed: int, native_grid=(96, 96, 96), left_box: Optional[CropBox] = None,
                  noise_sigma: float = 0.01) -> HeadPhantom:
    """Whole-head phantom at 0.5 mm with both thalami, plus its 1 mm native copy."""
    hr_shape = tuple(2 * s for s in native_grid)
    if left_box is None:
        ext = tuple(spec.grid)
        left_box = CropBox((hr_shape[0] // 2 - ext[0], (hr_shape[1] - ext[1]) // 2, (hr_shape[2] - ext[2]) // 2), ext)
    if tuple(left_box.extent) != tuple(spec.grid):
        raise DataError(f"crop extent {left_box.extent} must match phantom grid {spec.grid}")
    right_box = left_box.mirrored(hr_shape)

    rng = np.random.default_rng(derive_seed(seed, "head"))
    coords = np.indices(hr_shape, dtype=np.float64)
    centre = np.array([(s - 1) / 2.0 for s in hr_shape]).reshape(3, 1, 1, 1)
    semi = np.array([0.42 * s for s in hr_shape]).reshape(3, 1, 1, 1)
    radius = np.sqrt(np.sum(((coords - centre) / semi) ** 2, axis=0))
    head = radius <= 1.0
    t1 = np.zeros(hr_shape)
    t1[head] = 0.80
    t1[head & (radius > 0.85)] = 0.65
    t1[head & (radius > 0.95)] = 0.55

    case = generate_case(spec.model_copy(update={"noise_sigma": 0.0}), derive_seed(seed, "thalamus"), case_id=f"head-{seed}")
    mirrored_t1 = mirror_lr(case.modalities["T1"])
    t1[left_box.slices] = case.modalities["T1"].data
    t1[right_box.slices] = mirrored_t1.data
    if noise_sigma > 0:
        t1 = t1 + noise_sigma * rng.standard_normal(hr_shape) * head

    t1_hr = Volume3D(t1, space=Space.MNI_HR)
    native = avg_pool(t1_hr, 2)
    t1_native = replace(native, space=Space.NATIVE)
    icv = head.reshape(native_grid[0], 2, native_grid[1], 2, native_grid[2], 2).mean(axis=(1, 3, 5)) >= 0.5
    right_labels = mirror_lr(case.labels)
    return HeadPhantom(t1_hr, t1_native, case.labels, right_labels, icv, left_box, right_box)


def make_template(spec: PhantomSpec, native_grid=(96, 96, 96), left_box: Optional[CropBox] = None) -> Volume3D:
    """Noise-free 1 mm head phantom tagged as the standard template space."""
    head = generate_head(spec.model_copy(update={"noise_sigma": 0.0}), seed=0, native_grid=native_grid,
                         left_box=left_box, noise_sigma=0.0)
    return replace(head.t1_native, space=Space.MNI_STD, provenance={"template": "phantom"})
