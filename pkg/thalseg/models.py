"""Network specs, trained-model containers and inference helpers.

Functions:
- build_dpn / build_unet / build_synthesis_net / build_superres_net /
  build_autoencoder / build_registration_net: untrained TrainedModel
- build_model(spec): dispatch on spec.name
- count_parameters / expected_parameter_count: runtime and closed-form counts
- save_checkpoint / load_checkpoint: torch container with spec echo and log
- case_inputs / predict_proba / ensemble_proba / segment_case: inference
"""
import copy
import logging
import os
from dataclasses import dataclass, field
from typing import List, Literal, NamedTuple, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import Field, model_validator
from torch import nn

from .base import StrictModel
from .errors import DataError, VolumeError
from .networks import (
    DPN,
    ConvAutoencoder,
    RegistrationNet,
    SuperResNet,
    SynthesisNet,
    UNet3D,
    conv_block_parameters,
)
from .volumes import CaseBundle, LabelMap, LabelSchema, zscore_array

logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "thalseg-checkpoint"
CHECKPOINT_VERSION = 1
ATLAS_CHANNEL = "atlas"

# Parameter counts reported for the two segmentation architectures at width 56.
REFERENCE_DPN_PARAMETERS = 1_034_355
REFERENCE_UNET_PARAMETERS = 8_394_470


class NetworkSpec(StrictModel):
    name: Literal["dpn", "unet", "synthesis", "superres", "autoencoder", "registration"] = "dpn"
    input_channels: int = Field(2, ge=1)
    output_channels: int = Field(14, ge=1)
    width: int = Field(56, ge=1)
    levels: int = Field(4, ge=2)
    dropout_rate: float = Field(0.2, ge=0, lt=1)
    head: Literal["softmax", "linear", "displacement"] = "softmax"
    coarse_blocks: int = Field(3, ge=1)
    refine_blocks: Tuple[int, ...] = (2, 2, 3)
    convs_per_level: int = Field(1, ge=1)
    deeply_supervised: bool = True
    latent_dim: int = Field(32, ge=1)
    factor: int = 2
    modalities: Tuple[str, ...] = ("T1", "WMn")
    target: Optional[str] = None

    @model_validator(mode="after")
    def _consistent(self):
        if self.name == "dpn" and len(self.refine_blocks) != self.levels - 1:
            raise ValueError(f"refine_blocks needs levels - 1 = {self.levels - 1} entries")
        if self.name in ("dpn", "unet", "synthesis", "autoencoder") and len(self.modalities) != self.input_channels:
            raise ValueError(f"{len(self.modalities)} modalities for {self.input_channels} input channels")
        if self.name == "superres" and self.factor != 2:
            raise ValueError("only factor 2 superresolution is supported")
        return self

    @property
    def uses_atlas(self) -> bool:
        return ATLAS_CHANNEL in self.modalities


class LogEntry(NamedTuple):
    epoch: int
    loss: float
    val_dice: Optional[float]


@dataclass
class TrainedModel:
    spec: NetworkSpec
    module: nn.Module
    training_log: List[LogEntry] = field(default_factory=list)
    is_trained: bool = False

    @property
    def parameter_count(self) -> int:
        return count_parameters(self)

    @property
    def weights(self):
        return self.module.state_dict()

    @property
    def device(self) -> torch.device:
        return next(self.module.parameters()).device

    def copy(self) -> "TrainedModel":
        return TrainedModel(self.spec.model_copy(), copy.deepcopy(self.module), list(self.training_log), self.is_trained)

    def to(self, device) -> "TrainedModel":
        self.module.to(device)
        return self


def build_dpn(spec: NetworkSpec) -> TrainedModel:
    net = DPN(spec.input_channels, spec.output_channels, spec.width, spec.levels, spec.dropout_rate,
              spec.coarse_blocks, spec.refine_blocks, spec.head)
    return TrainedModel(spec, net)


def build_unet(spec: NetworkSpec) -> TrainedModel:
    net = UNet3D(spec.input_channels, spec.output_channels, spec.width, spec.levels, spec.dropout_rate,
                 spec.convs_per_level, spec.head)
    return TrainedModel(spec, net)


def build_synthesis_net(in_channels: int = 1, deeply_supervised: bool = True, width: int = 16,
                        levels: int = 3) -> TrainedModel:
    if in_channels not in (1, 2):
        raise DataError("synthesis takes T1 (1 channel) or T1+T2 (2 channels)")
    modalities = ("T1",) if in_channels == 1 else ("T1", "T2")
    spec = NetworkSpec(name="synthesis", input_channels=in_channels, output_channels=1, width=width,
                       levels=levels, head="linear", deeply_supervised=deeply_supervised,
                       modalities=modalities, target="WMn", dropout_rate=0.0)
    return TrainedModel(spec, _build_module(spec))


def build_superres_net(factor: int = 2, width: int = 16, n_blocks: int = 3) -> TrainedModel:
    if factor != 2:
        raise DataError("only factor 2 superresolution is supported")
    spec = NetworkSpec(name="superres", input_channels=1, output_channels=1, width=width, levels=n_blocks,
                       head="linear", modalities=("T1",), target="T1", dropout_rate=0.0)
    return TrainedModel(spec, _build_module(spec))


def build_autoencoder(latent_dim: int = 32, width: int = 8, modalities: Sequence[str] = ("T1",)) -> TrainedModel:
    spec = NetworkSpec(name="autoencoder", input_channels=len(modalities), output_channels=len(modalities),
                       width=width, head="linear", latent_dim=latent_dim, modalities=tuple(modalities),
                       dropout_rate=0.0)
    return TrainedModel(spec, _build_module(spec))


def build_registration_net(width: int = 8, levels: int = 3) -> TrainedModel:
    spec = NetworkSpec(name="registration", input_channels=2, output_channels=3, width=width, levels=levels,
                       head="displacement", modalities=("T1",), dropout_rate=0.0)
    return TrainedModel(spec, _build_module(spec))


def _build_module(spec: NetworkSpec) -> nn.Module:
    if spec.name == "dpn":
        return build_dpn(spec).module
    if spec.name == "unet":
        return build_unet(spec).module
    if spec.name == "synthesis":
        return SynthesisNet(spec.input_channels, spec.output_channels, spec.width, spec.levels, spec.deeply_supervised)
    if spec.name == "superres":
        return SuperResNet(spec.input_channels, spec.width, spec.levels, spec.factor)
    if spec.name == "autoencoder":
        return ConvAutoencoder(spec.input_channels, spec.width, spec.latent_dim)
    return RegistrationNet(spec.width, spec.levels)


def build_model(spec: NetworkSpec) -> TrainedModel:
    return TrainedModel(spec, _build_module(spec))


def with_atlas_channel(spec: NetworkSpec) -> NetworkSpec:
    """Same architecture with the atlas prior appended as an input channel."""
    if spec.uses_atlas:
        return spec.model_copy()
    return spec.model_copy(update={
        "modalities": tuple(spec.modalities) + (ATLAS_CHANNEL,),
        "input_channels": spec.input_channels + 1,
    })


def count_parameters(model) -> int:
    module = model.module if isinstance(model, TrainedModel) else model
    return int(sum(p.numel() for p in module.parameters() if p.requires_grad))


def expected_parameter_count(spec: NetworkSpec) -> int:
    """Closed-form parameter count for the segmentation and superres builders."""
    w, cin, cout = spec.width, spec.input_channels, spec.output_channels
    head = w * cout + cout
    if spec.name == "dpn":
        total = conv_block_parameters(cin, w) + (spec.coarse_blocks - 1) * conv_block_parameters(w, w)
        for n in spec.refine_blocks:
            total += conv_block_parameters(cin, w) + conv_block_parameters(2 * w, w)
            total += (n - 1) * conv_block_parameters(w, w)
        return total + head
    if spec.name == "unet":
        filters = [w * 2 ** i for i in range(spec.levels)]
        c = spec.convs_per_level
        total, prev = 0, cin
        for f in filters:
            total += conv_block_parameters(prev, f) + (c - 1) * conv_block_parameters(f, f)
            prev = f
        for i in range(spec.levels - 1):
            total += conv_block_parameters(filters[i] + filters[i + 1], filters[i])
            total += (c - 1) * conv_block_parameters(filters[i], filters[i])
        return total + head
    if spec.name == "superres":
        body = conv_block_parameters(cin, w) + (spec.levels - 1) * conv_block_parameters(w, w)
        return body + 27 * w * cin + cin
    raise DataError(f"no closed-form parameter count for {spec.name}")


def save_checkpoint(model: TrainedModel, path: str) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    torch.save({
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "spec": model.spec.model_dump(mode="json"),
        "state_dict": {k: v.detach().cpu() for k, v in model.module.state_dict().items()},
        "training_log": [list(e) for e in model.training_log],
        "is_trained": model.is_trained,
    }, path)
    logger.info("saved %s checkpoint to %s", model.spec.name, path)
    return path


def load_checkpoint(path: str, device: str = "cpu") -> TrainedModel:
    if not os.path.exists(path):
        raise DataError(f"missing checkpoint: {path}")
    blob = torch.load(path, map_location=device, weights_only=True)
    if blob.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a thalseg checkpoint")
    spec = NetworkSpec.model_validate(blob["spec"])
    model = build_model(spec)
    model.module.load_state_dict(blob["state_dict"])
    model.module.to(device)
    model.training_log = [LogEntry(int(e[0]), float(e[1]), None if e[2] is None else float(e[2]))
                          for e in blob["training_log"]]
    model.is_trained = bool(blob["is_trained"])
    return model


def network_multiple(model: TrainedModel) -> int:
    return int(getattr(model.module, "multiple", 1))


def pad_array(x: np.ndarray, multiple: int, mode: str = "edge") -> Tuple[np.ndarray, Tuple[int, int, int]]:
    """Trailing pad of the last three axes to a multiple."""
    after = tuple((-s) % multiple for s in x.shape[-3:])
    if not any(after):
        return x, after
    widths = [(0, 0)] * (x.ndim - 3) + [(0, a) for a in after]
    if mode == "edge":
        return np.pad(x, widths, mode="edge"), after
    return np.pad(x, widths, mode="constant"), after


def unpad_array(x: np.ndarray, after: Sequence[int]) -> np.ndarray:
    if not any(after):
        return x
    slices = tuple(slice(0, s - a) for s, a in zip(x.shape[-3:], after))
    return x[(Ellipsis,) + slices]


def case_inputs(case: CaseBundle, spec: NetworkSpec) -> np.ndarray:
    """(C, X, Y, Z) network input: each modality z-scored independently."""
    missing = [m for m in spec.modalities if m not in case.modalities]
    if missing:
        raise DataError(f"case {case.meta.case_id} lacks input modalities {missing}")
    return np.stack([zscore_array(case.modalities[m].data) for m in spec.modalities]).astype(np.float32)


@torch.no_grad()
def predict_proba(model: TrainedModel, x: np.ndarray) -> np.ndarray:
    """Forward a single (C, X, Y, Z) input; returns (out, X, Y, Z) float32."""
    if x.ndim != 4 or x.shape[0] != model.spec.input_channels:
        raise VolumeError(f"expected ({model.spec.input_channels}, X, Y, Z) input, got {x.shape}")
    padded, after = pad_array(x, network_multiple(model))
    model.module.eval()
    tensor = torch.from_numpy(np.ascontiguousarray(padded, dtype=np.float32)).unsqueeze(0).to(model.device)
    out = model.module(tensor)[0].cpu().numpy()
    return unpad_array(out, after).astype(np.float32)


def ensemble_proba(models: Sequence[TrainedModel], case: CaseBundle) -> np.ndarray:
    """Average class probabilities of several segmentation models."""
    if not models:
        raise DataError("an ensemble needs at least one model")
    total = None
    for m in models:
        p = predict_proba(m, case_inputs(case, m.spec)).astype(np.float64)
        if total is not None and p.shape != total.shape:
            raise DataError("ensemble members disagree on output channels")
        total = p if total is None else total + p
    return (total / len(models)).astype(np.float32)


def labels_from_proba(proba: np.ndarray, schema: LabelSchema, like) -> LabelMap:
    if proba.shape[0] != schema.n_labels + 1:
        raise DataError(f"{proba.shape[0]} output channels for a {schema.n_labels}-label schema")
    return LabelMap(np.argmax(proba, axis=0).astype(np.int16), schema, like.spacing, like.space, like.side)


def segment_case(models: Sequence[TrainedModel], case: CaseBundle, schema: LabelSchema) -> LabelMap:
    return labels_from_proba(ensemble_proba(models, case), schema, case.reference)
