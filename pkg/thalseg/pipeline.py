"""End-to-end segmentation of a standard-resolution T1 volume.

The plan is an ordered list of StepSpec. Each step declares the space it
reads and the space it writes; `check_plan` refuses plans that skip or
reverse the native -> mni_std -> mni_hr -> crop chain. Preprocessing steps
may be replaced by an external command (see ExternalCommandStep).

Also here: the library-creation label-transfer workflow.
"""
import json
import logging
import os
import platform
import shlex
import subprocess
import tempfile
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
from pydantic import Field

from . import __version__
from .atlas import AtlasLibrary, FusionParams, build_subject_atlas, prior_channel
from .base import StrictModel
from .errors import DataError, PipelineError
from .models import TrainedModel, ensemble_proba, labels_from_proba, load_checkpoint, predict_proba, save_checkpoint
from .preprocessing import affine_to_template, bias_correct, denoise, extract_icv, normalize_intensity
from .volume_io import load_volume, read_cases, save_volume, write_cases
from .volumes import (
    CaseBundle,
    CaseMeta,
    CropBox,
    LabelMap,
    LabelSchema,
    MNI_HR_SPACING,
    THALAMUS_SCHEMA,
    Side,
    Space,
    Volume3D,
    crop_roi,
    mirror_lr,
    uncrop,
    zscore_array,
)

logger = logging.getLogger(__name__)

SPACE_ORDER = (Space.NATIVE, Space.MNI_STD, Space.MNI_HR, Space.CROP)
BUNDLE_FILE = "bundle.json"


class StepSpec(StrictModel):
    name: str
    impl: str = "builtin"
    command: Optional[List[str]] = None
    params: Dict[str, Any] = Field(default_factory=dict)
    enabled: bool = True
    in_space: Space
    out_space: Space


def default_plan() -> List[StepSpec]:
    native, std, hr, crop = SPACE_ORDER
    return [
        StepSpec(name="denoise", in_space=native, out_space=native),
        StepSpec(name="affine", in_space=native, out_space=std),
        StepSpec(name="bias_correct", in_space=std, out_space=std),
        StepSpec(name="normalize", in_space=std, out_space=std),
        StepSpec(name="icv", in_space=std, out_space=std),
        StepSpec(name="second_pass", in_space=std, out_space=std),
        StepSpec(name="superresolve", in_space=std, out_space=hr),
        StepSpec(name="crop", in_space=hr, out_space=crop),
        StepSpec(name="synthesize", in_space=crop, out_space=crop),
        StepSpec(name="atlas", in_space=crop, out_space=crop),
        StepSpec(name="segment", in_space=crop, out_space=crop),
    ]


def check_plan(steps: Sequence[StepSpec], start: Space = Space.NATIVE) -> List[StepSpec]:
    """Enabled steps in order, after checking their space transitions."""
    current = Space(start)
    active = [s for s in steps if s.enabled]
    for step in active:
        if step.in_space is not current:
            raise DataError(f"step '{step.name}' reads {step.in_space.value} but the data is in {current.value}")
        if SPACE_ORDER.index(step.out_space) < SPACE_ORDER.index(step.in_space):
            raise DataError(f"step '{step.name}' moves backwards from {step.in_space.value} to {step.out_space.value}")
        if step.impl not in ("builtin", "external"):
            raise DataError(f"step '{step.name}' has unknown implementation {step.impl!r}")
        if step.impl == "external" and not step.command:
            raise DataError(f"external step '{step.name}' has no command")
        current = step.out_space
    if current is not Space.CROP or not any(s.name == "segment" for s in active):
        raise DataError("the plan must end with the segment step in crop space")
    return active


class ExternalCommandStep:
    """Run a command on a NIfTI file.

    Contract: the command template contains `{input}` and `{output}`; the
    tool reads the input volume and writes a volume of the same kind to the
    output path. The result is tagged with the step's declared space.
    """

    def __init__(self, spec: StepSpec, timeout: float = 3600):
        self.spec = spec
        self.timeout = timeout

    def __call__(self, v: Volume3D, workdir: str) -> Volume3D:
        src = os.path.join(workdir, f"{self.spec.name}_input.nii.gz")
        dst = os.path.join(workdir, f"{self.spec.name}_output.nii.gz")
        save_volume(src, v)
        args = [a.format(input=src, output=dst, **self.spec.params) for a in self.spec.command]
        logger.info("running external step %s: %s", self.spec.name, " ".join(shlex.quote(a) for a in args))
        proc = subprocess.run(args, capture_output=True, text=True, timeout=self.timeout)
        if proc.returncode != 0:
            raise DataError(f"command exited with {proc.returncode}: {proc.stderr.strip()[-500:]}")
        out = load_volume(dst)
        return replace(out, space=self.spec.out_space, side=v.side)


@dataclass
class ModelBundle:
    superres: TrainedModel
    synthesis: TrainedModel
    segmenters: List[TrainedModel]
    registration: Optional[TrainedModel]
    library: AtlasLibrary
    schema: LabelSchema

    def save(self, directory: str) -> str:
        os.makedirs(directory, exist_ok=True)
        files = {
            "superres": save_checkpoint(self.superres, os.path.join(directory, "superres.pt")),
            "synthesis": save_checkpoint(self.synthesis, os.path.join(directory, "synthesis.pt")),
            "segmenters": [save_checkpoint(m, os.path.join(directory, f"segmenter{i}.pt"))
                           for i, m in enumerate(self.segmenters)],
        }
        if self.registration is not None:
            files["registration"] = save_checkpoint(self.registration, os.path.join(directory, "registration.pt"))
        cases = [CaseBundle({"T1": e.image}, e.labels, CaseMeta(case_id=e.case_id, side=e.image.side))
                 for e in self.library.entries]
        write_cases(cases, os.path.join(directory, "library"))
        manifest = {k: ([os.path.basename(p) for p in v] if isinstance(v, list) else os.path.basename(v))
                    for k, v in files.items()}
        manifest["n_labels"] = self.schema.n_labels
        path = os.path.join(directory, BUNDLE_FILE)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        return path

    @classmethod
    def load(cls, directory: str, device: str = "cpu") -> "ModelBundle":
        path = os.path.join(directory, BUNDLE_FILE)
        if not os.path.exists(path):
            raise DataError(f"no model bundle at {directory}")
        with open(path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        schema = THALAMUS_SCHEMA.subset(manifest["n_labels"])

        def ckpt(name):
            return load_checkpoint(os.path.join(directory, name), device)

        library = AtlasLibrary.from_cases(read_cases(os.path.join(directory, "library"), schema))
        return cls(
            superres=ckpt(manifest["superres"]),
            synthesis=ckpt(manifest["synthesis"]),
            segmenters=[ckpt(n) for n in manifest["segmenters"]],
            registration=ckpt(manifest["registration"]) if "registration" in manifest else None,
            library=library,
            schema=schema,
        )


class PipelineConfig(StrictModel):
    steps: List[StepSpec] = Field(default_factory=default_plan)
    crop_extent: Tuple[int, int, int] = (48, 48, 48)
    left_offset: Tuple[int, int, int] = (48, 72, 72)
    right_offset: Optional[Tuple[int, int, int]] = None
    atlas_cases: int = Field(20, ge=1)
    fusion: FusionParams = Field(default_factory=FusionParams)
    template: Optional[str] = None
    workers: int = Field(1, ge=1)
    save_intermediates: bool = False

    def boxes(self, hr_shape) -> Tuple[CropBox, CropBox]:
        left = CropBox(tuple(self.left_offset), tuple(self.crop_extent))
        right = CropBox(tuple(self.right_offset), tuple(self.crop_extent)) if self.right_offset else left.mirrored(hr_shape)
        return left, right


@dataclass
class PipelineRun:
    left: Optional[LabelMap] = None
    right: Optional[LabelMap] = None
    timings: Dict[str, float] = field(default_factory=dict)
    provenance: Dict[str, Any] = field(default_factory=dict)
    artifacts: Dict[str, str] = field(default_factory=dict)
    icv_mm3: Optional[float] = None
    total_seconds: float = 0.0

    def combined(self) -> LabelMap:
        """Both thalami placed back into the 0.5 mm template grid."""
        shape = tuple(self.provenance["hr_shape"])
        left_box = CropBox(tuple(self.provenance["left_box"]["offset"]), tuple(self.provenance["left_box"]["extent"]))
        right_box = CropBox(tuple(self.provenance["right_box"]["offset"]), tuple(self.provenance["right_box"]["extent"]))
        data = uncrop(self.left, left_box, shape).data
        data[right_box.slices] = self.right.data
        return LabelMap(data, self.left.schema, MNI_HR_SPACING, Space.MNI_HR, Side.NA)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "timings": self.timings,
            "total_seconds": round(self.total_seconds, 3),
            "icv_mm3": self.icv_mm3,
            "provenance": self.provenance,
            "artifacts": self.artifacts,
        }


def superresolve(model: TrainedModel, v: Volume3D) -> Volume3D:
    """x2 superresolution in z-score units, mapped back to the input scale."""
    data = v.data.astype(np.float64)
    mean, std = float(data.mean()), float(data.std())
    z = zscore_array(data)
    out = predict_proba(model, z[None])[0].astype(np.float64)
    if std > 0:
        out = out * std + mean
    else:
        out = np.full(out.shape, mean)
    spacing = tuple(s / 2 for s in v.spacing)
    space = Space.MNI_HR if v.space is Space.MNI_STD else v.space
    return Volume3D(out.astype(np.float32), spacing, space, v.side, dict(v.provenance, superresolved=True))


def synthesize(model: TrainedModel, case: CaseBundle) -> Volume3D:
    """Synthetic WMn (z-score units) from the case's T1 (and T2)."""
    missing = [m for m in model.spec.modalities if m not in case.modalities]
    if missing:
        raise DataError(f"synthesis needs modalities {missing} that case {case.meta.case_id} lacks")
    x = np.stack([zscore_array(case.modalities[m].data) for m in model.spec.modalities])
    out = predict_proba(model, x)[0]
    ref = case.reference
    return Volume3D(out, ref.spacing, ref.space, ref.side, {"synthetic": True})


class _Context:
    def __init__(self, v: Volume3D, bundle: ModelBundle, config: PipelineConfig, template: Optional[Volume3D],
                 workdir: str):
        self.v = v
        self.bundle = bundle
        self.config = config
        self.template = template
        self.workdir = workdir
        self.icv_mask = None
        self.icv_mm3 = None
        self.cases: Dict[str, CaseBundle] = {}
        self.labels: Dict[str, LabelMap] = {}
        self.provenance: Dict[str, Any] = {}


def _step_denoise(ctx, step):
    ctx.v = denoise(ctx.v, **step.params)


def _step_affine(ctx, step):
    if ctx.template is None:
        raise DataError("affine registration needs a template volume")
    ctx.v, transform = affine_to_template(ctx.v, ctx.template, space=Space.MNI_STD, **step.params)
    ctx.provenance["affine"] = transform.to_dict()["voxel_matrix"]


def _step_bias(ctx, step):
    ctx.v = bias_correct(ctx.v, **step.params)


def _step_normalize(ctx, step):
    ctx.v = normalize_intensity(ctx.v, **step.params)


def _step_icv(ctx, step):
    ctx.icv_mask, ctx.icv_mm3 = extract_icv(ctx.v, **step.params)


def _step_second_pass(ctx, step):
    mask = ctx.icv_mask
    ctx.v = normalize_intensity(bias_correct(ctx.v, mask=mask), mask=mask)


def _step_superresolve(ctx, step):
    ctx.v = superresolve(ctx.bundle.superres, ctx.v)


def _step_crop(ctx, step):
    if ctx.v.space is not Space.MNI_HR:
        ctx.v = replace(ctx.v, space=Space.MNI_HR)
    left_box, right_box = ctx.config.boxes(ctx.v.shape)
    left = crop_roi(replace(ctx.v, side=Side.NA), left_box)
    right = mirror_lr(crop_roi(replace(ctx.v, side=Side.NA), right_box))
    ctx.cases["left"] = CaseBundle({"T1": replace(left, side=Side.LEFT)}, meta=CaseMeta(case_id="left", side=Side.LEFT))
    ctx.cases["right"] = CaseBundle({"T1": replace(right, side=Side.LEFT)}, meta=CaseMeta(case_id="right", side=Side.LEFT))
    ctx.provenance.update({
        "hr_shape": list(ctx.v.shape),
        "left_box": {"offset": list(left_box.offset), "extent": list(left_box.extent)},
        "right_box": {"offset": list(right_box.offset), "extent": list(right_box.extent)},
    })


def _step_synthesize(ctx, step):
    for side, case in ctx.cases.items():
        ctx.cases[side] = case.with_modality("WMn", synthesize(ctx.bundle.synthesis, case))


def _step_atlas(ctx, step):
    selected = {}
    for side, case in ctx.cases.items():
        prior = build_subject_atlas(ctx.bundle.library, case.modalities["T1"], ctx.bundle.registration,
                                    ctx.config.atlas_cases, ctx.config.fusion)
        ctx.cases[side] = prior_channel(case, prior)
        selected[side] = prior.provenance["selected"]
    ctx.provenance["atlas_selected"] = selected


def _step_segment(ctx, step):
    for side, case in ctx.cases.items():
        labels = labels_from_proba(ensemble_proba(ctx.bundle.segmenters, case), ctx.bundle.schema, case.reference)
        if side == "right":
            labels = replace(mirror_lr(labels), side=Side.RIGHT)
        ctx.labels[side] = labels


BUILTIN_STEPS: Dict[str, Callable] = {
    "denoise": _step_denoise,
    "affine": _step_affine,
    "bias_correct": _step_bias,
    "normalize": _step_normalize,
    "icv": _step_icv,
    "second_pass": _step_second_pass,
    "superresolve": _step_superresolve,
    "crop": _step_crop,
    "synthesize": _step_synthesize,
    "atlas": _step_atlas,
    "segment": _step_segment,
}


def run_pipeline(t1: Volume3D, bundle: ModelBundle, config: Optional[PipelineConfig] = None,
                 template: Optional[Volume3D] = None, workdir: Optional[str] = None, seed: int = 0) -> PipelineRun:
    config = config or PipelineConfig()
    steps = check_plan(config.steps, t1.space)
    if template is None and config.template:
        template = load_volume(config.template)
    torch.manual_seed(seed)
    run = PipelineRun()
    run.provenance.update({
        "thalseg": __version__,
        "torch": torch.__version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
        "seed": seed,
        "steps": [s.name for s in steps],
    })
    if workdir:
        os.makedirs(workdir, exist_ok=True)
    start = time.perf_counter()
    with tempfile.TemporaryDirectory() as tmp:
        ctx = _Context(t1, bundle, config, template, workdir or tmp)
        for step in steps:
            t0 = time.perf_counter()
            try:
                if step.impl == "external":
                    ctx.v = ExternalCommandStep(step)(ctx.v, ctx.workdir)
                else:
                    if step.name not in BUILTIN_STEPS:
                        raise DataError(f"no built-in step named '{step.name}'")
                    BUILTIN_STEPS[step.name](ctx, step)
            except Exception as exc:
                run.provenance.update(ctx.provenance)
                raise PipelineError(step.name, exc, dict(run.provenance)) from exc
            run.timings[step.name] = round(time.perf_counter() - t0, 3)
            if config.save_intermediates and workdir and step.out_space is not Space.CROP:
                run.artifacts[step.name] = save_volume(os.path.join(workdir, f"{step.name}.nii.gz"), ctx.v)
            logger.info("pipeline step %s done in %.2fs", step.name, run.timings[step.name])
    run.provenance.update(ctx.provenance)
    run.left, run.right = ctx.labels.get("left"), ctx.labels.get("right")
    run.icv_mm3 = ctx.icv_mm3
    run.total_seconds = time.perf_counter() - start
    logger.info("pipeline finished in %.1fs", run.total_seconds)
    return run


def run_many(volumes: Sequence[Volume3D], bundle: ModelBundle, config: PipelineConfig,
             template: Optional[Volume3D] = None, workdirs: Optional[Sequence[str]] = None,
             seed: int = 0) -> List[PipelineRun]:
    """Independent runs over several inputs, up to `config.workers` at a time."""
    workdirs = list(workdirs) if workdirs is not None else [None] * len(volumes)
    if len(workdirs) != len(volumes):
        raise DataError(f"{len(workdirs)} work directories for {len(volumes)} inputs")

    def one(item):
        v, wd = item
        return run_pipeline(v, bundle, config, template, workdir=wd, seed=seed)

    if config.workers <= 1:
        return [one(item) for item in zip(volumes, workdirs)]
    with ThreadPoolExecutor(max_workers=config.workers) as pool:
        return list(pool.map(one, zip(volumes, workdirs)))


def save_run(run: PipelineRun, directory: str) -> Dict[str, str]:
    os.makedirs(directory, exist_ok=True)
    paths = {}
    if run.left is not None:
        paths["left"] = save_volume(os.path.join(directory, "left_labels.nii.gz"), run.left)
    if run.right is not None:
        paths["right"] = save_volume(os.path.join(directory, "right_labels.nii.gz"), run.right)
    run.artifacts.update(paths)
    paths["run"] = os.path.join(directory, "run.json")
    with open(paths["run"], "w", encoding="utf-8") as fh:
        json.dump(run.to_dict(), fh, indent=2, sort_keys=True)
    return paths


def mirror_case(case: CaseBundle) -> CaseBundle:
    mods = {name: mirror_lr(v) for name, v in case.modalities.items()}
    labels = mirror_lr(case.labels) if case.labels is not None else None
    meta = replace(case.meta, case_id=case.meta.case_id + "-mirrored", side=case.meta.side.flipped())
    return CaseBundle(mods, labels, meta)


def label_transfer_workflow(source_labeled: Sequence[CaseBundle], target_unlabeled: Sequence[CaseBundle],
                            synth_model: TrainedModel, seg_model: TrainedModel,
                            schema: LabelSchema) -> List[CaseBundle]:
    """Synthesize WMn for the targets, segment them with the source-trained model,
    then add a mirrored copy of every labeled target."""
    if not target_unlabeled:
        return []
    needed = [m for m in seg_model.spec.modalities if m != "WMn"]
    for case in source_labeled:
        if case.labels is None:
            raise DataError(f"source case {case.meta.case_id} has no labels")
        if "WMn" in seg_model.spec.modalities and "WMn" not in case.modalities:
            raise DataError(f"source case {case.meta.case_id} lacks the WMn labeling modality")
    out = []
    for case in target_unlabeled:
        missing = [m for m in list(synth_model.spec.modalities) + needed if m not in case.modalities]
        if missing:
            raise DataError(f"target case {case.meta.case_id} lacks modalities {missing}")
        with_wmn = case.with_modality("WMn", synthesize(synth_model, case))
        labels = labels_from_proba(ensemble_proba([seg_model], with_wmn), schema, with_wmn.reference)
        out.append(with_wmn.with_labels(labels, pseudo=True))
    out += [mirror_case(c) for c in out]
    logger.info("label transfer: %d source cases, %d labeled outputs", len(source_labeled), len(out))
    return out
