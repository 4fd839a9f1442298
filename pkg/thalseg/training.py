"""Training loop, augmentation and the task definitions it drives.

A task turns a case into an (input, target) pair and defines the loss and
validation score. `train` runs full-volume steps (batch size 1) with Adamax
by default, keeps the weights of the best validation epoch and returns a
new TrainedModel; the model passed in is left untouched.
"""
import logging
import sys
from typing import List, Literal, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import torch
import torch.nn.functional as F
from pydantic import Field
from scipy import ndimage
from tqdm import tqdm

from .base import StrictModel
from .errors import DataError, NumericError
from .losses_metrics import CompositeLoss, LabelWeights, dice_report
from .models import (LogEntry, NetworkSpec, TrainedModel, case_inputs, network_multiple, pad_array,
                     predict_proba, segment_case)
from .networks import smoothness_loss
from .volumes import CaseBundle, LabelSchema, zscore_array

logger = logging.getLogger(__name__)


class OptimizerConfig(StrictModel):
    algorithm: Literal["adamax", "adam"] = "adamax"
    lr: float = Field(2e-3, gt=0)
    betas: Tuple[float, float] = (0.9, 0.999)
    epochs: int = Field(1500, ge=0)
    steps_per_epoch: int = Field(50, ge=1)


class AugmentationPolicy(StrictModel):
    probability: float = Field(0.5, ge=0, le=1)
    resize_range: Tuple[float, float] = (0.9, 1.1)
    rotation_degrees: float = Field(10.0, ge=0)
    elastic_amplitude: float = Field(2.0, ge=0)
    elastic_bandwidth: float = Field(4.0, gt=0)
    contrast_range: Tuple[float, float] = (0.9, 1.1)
    brightness_range: Tuple[float, float] = (-0.1, 0.1)
    noise_sigma_range: Tuple[float, float] = (0.0, 0.05)

    @classmethod
    def none(cls) -> "AugmentationPolicy":
        return cls(probability=0.0)


def make_optimizer(params, opt: OptimizerConfig) -> torch.optim.Optimizer:
    if opt.algorithm == "adamax":
        return torch.optim.Adamax(params, lr=opt.lr, betas=opt.betas)
    return torch.optim.Adam(params, lr=opt.lr, betas=opt.betas)


def _rotation(axis: int, degrees: float) -> np.ndarray:
    t = np.deg2rad(degrees)
    c, s = np.cos(t), np.sin(t)
    i, j = [a for a in range(3) if a != axis]
    r = np.eye(3)
    r[i, i], r[i, j], r[j, i], r[j, j] = c, -s, s, c
    return r


def augment(inputs: np.ndarray, policy: AugmentationPolicy, rng: np.random.Generator,
            targets: Optional[np.ndarray] = None, labels: Optional[np.ndarray] = None):
    """Random geometric and intensity transforms.

    Geometry is shared by inputs, targets and labels; labels are resampled
    with nearest neighbour so schema membership never changes. Intensity
    transforms touch the inputs only.
    """
    if policy.probability == 0:
        return inputs, targets, labels
    shape = inputs.shape[1:]
    matrix = np.eye(3)
    disp = None
    if rng.random() < policy.probability:
        matrix = matrix * rng.uniform(*policy.resize_range)
    if rng.random() < policy.probability and policy.rotation_degrees > 0:
        angle = rng.uniform(-policy.rotation_degrees, policy.rotation_degrees)
        matrix = _rotation(int(rng.integers(3)), angle) @ matrix
    if rng.random() < policy.probability and policy.elastic_amplitude > 0:
        field = np.stack([ndimage.gaussian_filter(rng.standard_normal(shape), policy.elastic_bandwidth)
                          for _ in range(3)])
        peak = np.abs(field).max()
        disp = field * (policy.elastic_amplitude / peak) if peak > 0 else None

    if not np.allclose(matrix, np.eye(3)) or disp is not None:
        centre = (np.array(shape, dtype=np.float64) - 1) / 2
        grid = np.indices(shape, dtype=np.float64).reshape(3, -1)
        coords = np.linalg.inv(matrix) @ (grid - centre[:, None]) + centre[:, None]
        coords = coords.reshape((3,) + tuple(shape))
        if disp is not None:
            coords = coords + disp

        def warp(a, order):
            return ndimage.map_coordinates(a, coords, order=order, mode="nearest")

        inputs = np.stack([warp(c, 1) for c in inputs]).astype(np.float32)
        if targets is not None:
            targets = np.stack([warp(c, 1) for c in targets]).astype(np.float32)
        if labels is not None:
            labels = warp(labels, 0).astype(labels.dtype)

    out = []
    for channel in inputs:
        if rng.random() < policy.probability:
            channel = channel * rng.uniform(*policy.contrast_range)
        if rng.random() < policy.probability:
            channel = channel + rng.uniform(*policy.brightness_range)
        if rng.random() < policy.probability:
            channel = channel + rng.uniform(*policy.noise_sigma_range) * rng.standard_normal(channel.shape)
        out.append(channel)
    return np.stack(out).astype(np.float32), targets, labels


class CaseSampler(Protocol):
    def draw(self, rng: np.random.Generator) -> CaseBundle: ...


class UniformSampler:
    def __init__(self, cases: Sequence[CaseBundle]):
        if not cases:
            raise DataError("training needs at least one case")
        self.cases = list(cases)

    def draw(self, rng: np.random.Generator) -> CaseBundle:
        return self.cases[int(rng.integers(len(self.cases)))]


def as_sampler(dataset: Union[Sequence[CaseBundle], CaseSampler]) -> CaseSampler:
    if hasattr(dataset, "draw"):
        return dataset
    return UniformSampler(dataset)


class SegmentationTask:
    pairs = False

    def __init__(self, spec: NetworkSpec, schema: LabelSchema, weights: LabelWeights):
        if spec.output_channels != schema.n_labels + 1:
            raise DataError(f"network has {spec.output_channels} outputs for {schema.n_labels} labels + background")
        self.spec = spec
        self.schema = schema
        self.weights = weights
        self.criterion = CompositeLoss(weights)

    def sample(self, case, rng, policy, other=None):
        if case.labels is None:
            raise DataError(f"case {case.meta.case_id} has no labels")
        x, _, labels = augment(case_inputs(case, self.spec), policy, rng, labels=case.labels.data)
        y = np.eye(self.schema.n_labels + 1, dtype=np.float32)[labels]
        return x, np.moveaxis(y, -1, 0)

    def loss(self, module, x, y):
        return self.criterion(module(x), y)

    def validate(self, model, cases) -> Tuple[float, Optional[float]]:
        scores = [dice_report(segment_case([model], c, self.schema), c.labels).mean for c in cases]
        mean = float(np.mean(scores))
        return mean, mean


def _mae(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean(np.abs(a.astype(np.float64) - b)))


class SynthesisTask:
    """Regress a z-scored target modality (WMn) from the input modalities."""

    pairs = False

    def __init__(self, spec: NetworkSpec):
        if not spec.target:
            raise DataError("synthesis spec names no target modality")
        self.spec = spec

    def _target(self, case):
        if self.spec.target not in case.modalities:
            raise DataError(f"case {case.meta.case_id} lacks target modality {self.spec.target}")
        return zscore_array(case.modalities[self.spec.target].data)[None]

    def sample(self, case, rng, policy, other=None):
        x, y, _ = augment(case_inputs(case, self.spec), policy, rng, targets=self._target(case))
        return x, y

    def loss(self, module, x, y):
        if hasattr(module, "forward_with_aux"):
            main, aux = module.forward_with_aux(x)
        else:
            main, aux = module(x), []
        total = F.l1_loss(main, y)
        for level, a in enumerate(aux, start=1):
            total = total + F.l1_loss(a, F.avg_pool3d(y, 2 ** level)) / 2 ** level
        return total

    def validate(self, model, cases):
        errors = [_mae(predict_proba(model, case_inputs(c, self.spec)), self._target(c)) for c in cases]
        return -float(np.mean(errors)), None


def _pool2(a: np.ndarray) -> np.ndarray:
    c, x, y, z = a.shape
    return a.reshape(c, x // 2, 2, y // 2, 2, z // 2, 2).mean(axis=(2, 4, 6)).astype(np.float32)


class SuperResTask:
    """Learn HR T1 from its 2x average-pooled copy; some samples are constant."""

    pairs = False

    def __init__(self, spec: NetworkSpec, constant_fraction: float = 0.1):
        self.spec = spec
        self.constant_fraction = constant_fraction

    def _hr(self, case):
        hr = zscore_array(case.modalities[self.spec.modalities[0]].data)[None]
        hr, _ = pad_array(hr, 2)
        return hr

    def sample(self, case, rng, policy, other=None):
        hr = self._hr(case)
        if rng.random() < self.constant_fraction:
            hr = np.full(hr.shape, rng.normal(), dtype=np.float32)
        else:
            hr, _, _ = augment(hr, policy.model_copy(update={"contrast_range": (1.0, 1.0),
                                                             "brightness_range": (0.0, 0.0),
                                                             "noise_sigma_range": (0.0, 0.0)}), rng)
        return _pool2(hr), hr

    def loss(self, module, x, y):
        return F.l1_loss(module(x), y)

    def validate(self, model, cases):
        errors = []
        for c in cases:
            hr = self._hr(c)
            errors.append(_mae(predict_proba(model, _pool2(hr)), hr))
        return -float(np.mean(errors)), None


class AutoencoderTask:
    pairs = False

    def __init__(self, spec: NetworkSpec):
        self.spec = spec

    def sample(self, case, rng, policy, other=None):
        x = case_inputs(case, self.spec)
        return x, x

    def loss(self, module, x, y):
        return F.mse_loss(module(x), y)

    def validate(self, model, cases):
        errors = [float(np.mean((predict_proba(model, case_inputs(c, self.spec)) - case_inputs(c, self.spec)) ** 2))
                  for c in cases]
        return -float(np.mean(errors)), None


class RegistrationTask:
    """Unsupervised pairwise registration: MSE after warping + field smoothness."""

    pairs = True

    def __init__(self, spec: NetworkSpec, smooth_weight: float = 0.01, modality: str = "T1",
                 identity_fraction: float = 0.2):
        self.spec = spec
        self.smooth_weight = smooth_weight
        self.modality = modality
        self.identity_fraction = identity_fraction

    def _pair(self, moving, fixed):
        m = zscore_array(moving.modalities[self.modality].data)
        f = zscore_array(fixed.modalities[self.modality].data)
        return np.stack([m, f]), f[None]

    def sample(self, case, rng, policy, other=None):
        if other is None or rng.random() < self.identity_fraction:
            other = case
        return self._pair(case, other)

    def _loss(self, module, x):
        warped, flow = module.register(x[:, :1], x[:, 1:])
        return F.mse_loss(warped, x[:, 1:]) + self.smooth_weight * smoothness_loss(flow)

    def loss(self, module, x, y):
        return self._loss(module, x)

    @torch.no_grad()
    def validate(self, model, cases):
        model.module.eval()
        total = []
        for i, c in enumerate(cases):
            x, _ = self._pair(c, cases[(i + 1) % len(cases)])
            x, _ = pad_array(x, network_multiple(model))
            total.append(float(self._loss(model.module, torch.from_numpy(x)[None].to(model.device))))
        return -float(np.mean(total)), None


def _tensor(a: np.ndarray, device) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(a, dtype=np.float32)).unsqueeze(0).to(device)


def train(model: TrainedModel, dataset, task, opt: OptimizerConfig, aug: Optional[AugmentationPolicy] = None,
          seed: int = 0, validation: Optional[Sequence[CaseBundle]] = None, device=None,
          desc: Optional[str] = None) -> TrainedModel:
    """Fit `model` and return a new TrainedModel holding the best-validation weights.

    Without a validation set the epoch with the lowest training loss wins.
    """
    result = model.copy()
    if opt.epochs == 0:
        return result
    aug = aug or AugmentationPolicy.none()
    sampler = as_sampler(dataset)
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    if device is not None:
        result.to(device)
    module = result.module
    device = result.device
    optimizer = make_optimizer(module.parameters(), opt)
    multiple = network_multiple(result)
    label = desc or result.spec.name

    best_score, best_state = -np.inf, None
    epochs = tqdm(range(1, opt.epochs + 1), desc=label, disable=not sys.stderr.isatty(), leave=False)
    for epoch in epochs:
        module.train()
        losses: List[float] = []
        for step in range(opt.steps_per_epoch):
            case = sampler.draw(rng)
            other = sampler.draw(rng) if task.pairs else None
            x, y = task.sample(case, rng, aug, other)
            if multiple > 1:
                x, _ = pad_array(x, multiple)
                y, _ = pad_array(y, multiple)
            optimizer.zero_grad()
            loss = task.loss(module, _tensor(x, device), _tensor(y, device))
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss while training {label}", epoch=epoch, step=step)
            loss.backward()
            optimizer.step()
            losses.append(float(loss.detach()))
        mean_loss = float(np.mean(losses))
        if validation:
            score, val_dice = task.validate(result, validation)
        else:
            score, val_dice = -mean_loss, None
        result.training_log.append(LogEntry(epoch, mean_loss, val_dice))
        if score > best_score:
            best_score = score
            best_state = {k: v.detach().clone() for k, v in module.state_dict().items()}
        logger.info("%s epoch %d/%d loss %.5f val %s", label, epoch, opt.epochs, mean_loss,
                    "n/a" if val_dice is None else f"{val_dice:.4f}")
    module.load_state_dict(best_state)
    module.eval()
    result.is_trained = True
    return result


def make_task(model: TrainedModel, schema: Optional[LabelSchema] = None, weights: Optional[LabelWeights] = None):
    """Default task for a model's architecture."""
    spec = model.spec
    if spec.name in ("dpn", "unet"):
        if schema is None or weights is None:
            raise DataError("segmentation training needs a label schema and weights")
        return SegmentationTask(spec, schema, weights)
    if spec.name == "synthesis":
        return SynthesisTask(spec)
    if spec.name == "superres":
        return SuperResTask(spec)
    if spec.name == "autoencoder":
        return AutoencoderTask(spec)
    return RegistrationTask(spec)
