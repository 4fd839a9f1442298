"""Simplified preprocessing steps for standard-resolution T1 input.

Functions:
- denoise(v): non-local means (scikit-image) with an estimated noise level
- estimate_bias_field(v) / bias_correct(v): polynomial log-field fit
- affine_to_template(v, template): 12-DOF affine with an NCC objective
- normalize_intensity(v, anchors): piecewise-linear tissue mapping
- extract_icv(v): intracranial mask and volume in mm3

Any of these can be swapped for an external tool in the pipeline.
"""
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from scipy import ndimage
from skimage.filters import threshold_otsu
from skimage.restoration import denoise_nl_means, estimate_sigma
from sklearn.cluster import KMeans
from sklearn.linear_model import LinearRegression
from sklearn.preprocessing import PolynomialFeatures

from .errors import DataError, RegistrationError
from .volumes import LabelMap, Volume3D

logger = logging.getLogger(__name__)

MAX_FIT_VOXELS = 20000
DEFAULT_TISSUE_TARGETS = (0.3, 0.55, 0.8)


def _is_constant(data: np.ndarray) -> bool:
    return float(np.ptp(data)) == 0.0


def denoise(v: Volume3D, patch_size: int = 3, patch_distance: int = 3, h_factor: float = 0.8) -> Volume3D:
    data = v.data.astype(np.float64)
    if _is_constant(data):
        return v
    sigma = float(estimate_sigma(data, channel_axis=None))
    if sigma <= 0:
        return v
    out = denoise_nl_means(data, patch_size=patch_size, patch_distance=patch_distance,
                           h=h_factor * sigma, sigma=sigma, fast_mode=True, channel_axis=None)
    prov = dict(v.provenance, denoise_sigma=round(sigma, 6))
    return replace(v, data=out.astype(np.float32), provenance=prov)


def _fit_sample(mask: np.ndarray, seed: int = 0) -> np.ndarray:
    idx = np.flatnonzero(mask)
    if idx.size > MAX_FIT_VOXELS:
        idx = np.sort(np.random.default_rng(seed).choice(idx, MAX_FIT_VOXELS, replace=False))
    return idx


def _normalized_coords(shape) -> np.ndarray:
    axes = [np.linspace(-1.0, 1.0, s) for s in shape]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def _default_mask(data: np.ndarray) -> np.ndarray:
    return data > 0.1 * np.percentile(data, 99)


def estimate_bias_field(v: Volume3D, mask: Optional[np.ndarray] = None, order: int = 3,
                        n_classes: int = 3, iterations: int = 3) -> np.ndarray:
    """Smooth multiplicative field (mean 1 inside the mask)."""
    data = v.data.astype(np.float64)
    if _is_constant(data):
        return np.ones(v.shape)
    if mask is None:
        mask = _default_mask(data)
    if data[mask].min() <= 0:
        raise DataError("bias field estimation needs positive intensities inside the mask")
    log_i = np.log(np.where(mask, data, 1.0))
    coords = _normalized_coords(v.shape)
    poly = PolynomialFeatures(degree=order)
    sample = _fit_sample(mask)
    design = poly.fit_transform(coords[sample])
    field_log = np.zeros(v.shape)
    for _ in range(iterations):
        corrected = (log_i - field_log).ravel()[sample]
        k = min(n_classes, np.unique(corrected).size)
        km = KMeans(n_clusters=k, n_init=3, random_state=0).fit(corrected[:, None])
        residual = log_i.ravel()[sample] - km.cluster_centers_[km.labels_, 0]
        reg = LinearRegression().fit(design, residual)
        field_log = np.concatenate([
            reg.predict(poly.transform(coords[i:i + 200000])) for i in range(0, coords.shape[0], 200000)
        ]).reshape(v.shape)
        field_log -= field_log[mask].mean()
    return np.exp(field_log)


def bias_correct(v: Volume3D, mask: Optional[np.ndarray] = None, order: int = 3, n_classes: int = 3,
                 iterations: int = 3) -> Volume3D:
    """Divide out a smooth low-order field; mean intensity inside the mask is kept."""
    data = v.data.astype(np.float64)
    if _is_constant(data):
        return v
    if mask is None:
        mask = _default_mask(data)
    shift = 0.0
    if data[mask].min() <= 0:
        shift = float(-data[mask].min() + 0.01 * np.ptp(data[mask]) + 1e-6)
        logger.warning("bias correction: nonpositive intensities, shifting by %.4f before correcting", shift)
    shifted = replace(v, data=(data + shift).astype(np.float32))
    field_ = estimate_bias_field(shifted, mask, order, n_classes, iterations)
    corrected = (data + shift) / field_
    corrected *= (data[mask] + shift).mean() / corrected[mask].mean()
    corrected -= shift
    return replace(v, data=corrected.astype(np.float32), provenance=dict(v.provenance, bias_order=order))


@dataclass
class AffineTransform:
    """Pull-back map from template voxel p to source voxel A (p - c) + c + t."""

    matrix: np.ndarray
    translation: np.ndarray
    centre: np.ndarray
    output_shape: Tuple[int, int, int]
    output_spacing: Tuple[float, float, float]
    trace: List[float] = field(default_factory=list)

    def voxel_matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.matrix
        m[:3, 3] = self.centre + self.translation - self.matrix @ self.centre
        return m

    def is_identity(self, tol: float = 0.01) -> bool:
        return bool(np.abs(self.voxel_matrix() - np.eye(4)).max() <= tol)

    def apply(self, v, space=None):
        """Resample a volume (trilinear) or label map (nearest) onto the template grid."""
        m = self.voxel_matrix()
        is_labels = isinstance(v, LabelMap)
        out = ndimage.affine_transform(
            v.data.astype(np.float64), m[:3, :3], offset=m[:3, 3], output_shape=self.output_shape,
            order=0 if is_labels else 1, mode="constant", cval=0.0,
        )
        space = space or v.space
        prov = dict(v.provenance, affine=np.round(m, 6).tolist())
        if is_labels:
            return LabelMap(out.astype(np.int16), v.schema, self.output_spacing, space, v.side, prov)
        return Volume3D(out.astype(np.float32), self.output_spacing, space, v.side, prov)

    def to_dict(self) -> dict:
        return {"voxel_matrix": self.voxel_matrix().tolist(), "trace": list(self.trace)}


def _sample(moving: torch.Tensor, points: torch.Tensor, shape) -> torch.Tensor:
    scaled = [2.0 * points[..., i] / max(shape[i] - 1, 1) - 1.0 for i in range(3)]
    grid = torch.stack(scaled, dim=-1)[..., [2, 1, 0]]
    return F.grid_sample(moving, grid, mode="bilinear", padding_mode="zeros", align_corners=True)


def _torch_ncc(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a = a - a.mean()
    b = b - b.mean()
    return (a * b).sum() / torch.sqrt((a * a).sum() * (b * b).sum() + 1e-12)


def affine_to_template(v: Volume3D, template: Volume3D, factors: Sequence[int] = (4, 2, 1),
                       iterations: int = 40, space=None) -> Tuple[Volume3D, AffineTransform]:
    """Coarse-to-fine 12-DOF affine registration maximizing global NCC.

    Each level compares Gaussian-smoothed images on a template grid strided
    by the level factor; parameters are optimized with L-BFGS in float64.
    """
    t_shape, m_shape = template.shape, v.shape
    centre = (np.array(t_shape, dtype=np.float64) - 1) / 2
    lin = torch.zeros(3, 3, dtype=torch.float64, requires_grad=True)
    trans = torch.tensor(((np.array(m_shape) - np.array(t_shape)) / 2.0), dtype=torch.float64, requires_grad=True)
    c = torch.from_numpy(centre)
    trace: List[float] = []

    for f in factors:
        sigma = max(f / 2.0, 0.5) if f > 1 else 0.0
        mov = ndimage.gaussian_filter(v.data.astype(np.float64), sigma) if sigma else v.data.astype(np.float64)
        tpl = ndimage.gaussian_filter(template.data.astype(np.float64), sigma) if sigma else template.data.astype(np.float64)
        mov_t = torch.from_numpy(mov)[None, None]
        idx = [np.arange(0, s, f, dtype=np.float64) for s in t_shape]
        grid = np.stack(np.meshgrid(*idx, indexing="ij"), axis=-1)
        points = torch.from_numpy(grid)
        fixed = torch.from_numpy(tpl[::f, ::f, ::f].copy())
        optimizer = torch.optim.LBFGS([lin, trans], lr=1.0, max_iter=iterations, line_search_fn="strong_wolfe")

        def closure():
            optimizer.zero_grad()
            a = torch.eye(3, dtype=torch.float64) + lin
            q = (points - c) @ a.T + c + trans
            warped = _sample(mov_t, q[None], m_shape)[0, 0]
            loss = -_torch_ncc(warped, fixed)
            loss.backward()
            trace.append(float(loss.detach()))
            return loss

        level_start = len(trace)
        optimizer.step(closure)
        final = float(closure())
        if not np.isfinite(final):
            raise RegistrationError("affine optimizer produced a non-finite objective", trace)
        if final > trace[level_start] + 1e-6:
            raise RegistrationError(f"affine optimizer diverged at level x{f}", trace)
        logger.debug("affine level x%d: ncc %.5f", f, -final)

    transform = AffineTransform(
        matrix=np.eye(3) + lin.detach().numpy(),
        translation=trans.detach().numpy().copy(),
        centre=centre,
        output_shape=tuple(t_shape),
        output_spacing=template.spacing,
        trace=trace,
    )
    return transform.apply(v, space or template.space), transform


def piecewise_linear_map(data: np.ndarray, src: Sequence[float], dst: Sequence[float]) -> np.ndarray:
    """Map through increasing anchors; linear extrapolation beyond both ends."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.size < 2 or np.any(np.diff(src) <= 0) or np.any(np.diff(dst) <= 0):
        raise DataError("anchors must be strictly increasing")
    data = np.asarray(data, dtype=np.float64)
    out = np.interp(data, src, dst)
    lo_slope = (dst[1] - dst[0]) / (src[1] - src[0])
    hi_slope = (dst[-1] - dst[-2]) / (src[-1] - src[-2])
    out = np.where(data < src[0], dst[0] + (data - src[0]) * lo_slope, out)
    return np.where(data > src[-1], dst[-1] + (data - src[-1]) * hi_slope, out)


def tissue_anchors(data: np.ndarray, mask: np.ndarray, anchors: int = 3) -> np.ndarray:
    values = data[mask].astype(np.float64)
    if np.unique(values).size < anchors:
        raise DataError(f"histogram has fewer than {anchors} distinct intensities")
    sample = values[_fit_sample(np.ones(values.size, dtype=bool))]
    km = KMeans(n_clusters=anchors, n_init=5, random_state=0).fit(sample[:, None])
    centres = np.sort(km.cluster_centers_[:, 0])
    if np.any(np.diff(centres) <= 0):
        raise DataError("tissue anchors collapsed; histogram is degenerate")
    return centres


def normalize_intensity(v: Volume3D, anchors: int = 3, mask: Optional[np.ndarray] = None,
                        targets: Optional[Sequence[float]] = None) -> Volume3D:
    """Piecewise-linear mapping of tissue modes onto fixed targets (0 stays 0)."""
    data = v.data.astype(np.float64)
    if mask is None:
        mask = _default_mask(data)
    src = tissue_anchors(data, mask, anchors)
    if targets is None:
        targets = DEFAULT_TISSUE_TARGETS if anchors == 3 else np.linspace(0.2, 0.9, anchors)
    dst = np.asarray(targets, dtype=np.float64)
    if dst.size != anchors:
        raise DataError(f"{dst.size} targets for {anchors} anchors")
    if src[0] > 0 and dst[0] > 0:
        src, dst = np.concatenate([[0.0], src]), np.concatenate([[0.0], dst])
    out = piecewise_linear_map(data, src, dst)
    prov = dict(v.provenance, tissue_anchors=np.round(src, 6).tolist())
    return replace(v, data=out.astype(np.float32), provenance=prov)


def extract_icv(v: Volume3D, closing_iterations: int = 2) -> Tuple[np.ndarray, float]:
    """Otsu threshold, closing, largest component, hole filling."""
    data = v.data.astype(np.float64)
    if _is_constant(data):
        raise DataError("cannot extract an intracranial mask from a constant volume")
    mask = data > threshold_otsu(data)
    structure = ndimage.generate_binary_structure(3, 1)
    mask = ndimage.binary_closing(mask, structure=structure, iterations=closing_iterations, border_value=0)
    labels, n = ndimage.label(mask, structure=structure)
    if n == 0:
        raise DataError("intracranial mask is empty")
    sizes = np.bincount(labels.ravel())
    sizes[0] = 0
    mask = labels == int(np.argmax(sizes))
    mask = ndimage.binary_fill_holes(mask)
    return mask, float(mask.sum()) * v.voxel_volume
