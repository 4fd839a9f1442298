"""Training workflows shared by the CLI, and the phantom ablation studies.

Functions:
- phantom_splits(config): train / validation / test phantom cases
- training_weights(config, cases): GDL label weights per config
- train_segmenter / train_helper: one network per config section
- evaluate(models, cases): per-case Dice reports and their summary
- ablate(config): architecture, resolution, modality and ensemble studies
"""
import logging
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd

from .atlas import AtlasLibrary, attach_priors
from .base import derive_seed
from .config import Config, get_device
from .errors import DataError
from .losses_metrics import (
    DiceReport,
    LabelWeights,
    dice_report,
    label_weights_from_training,
    reference_label_weights,
    summarize_reports,
    wilcoxon_signed_rank,
)
from .models import (
    NetworkSpec,
    TrainedModel,
    build_autoencoder,
    build_model,
    build_registration_net,
    build_superres_net,
    build_synthesis_net,
    segment_case,
    with_atlas_channel,
)
from .phantom import degrade, generate_dataset, split_dataset
from .training import AugmentationPolicy, OptimizerConfig, make_task, train
from .volumes import CaseBundle, LabelSchema

logger = logging.getLogger(__name__)


def phantom_splits(config: Config, seed: Optional[int] = None):
    seed = config.seed if seed is None else seed
    cases = generate_dataset(config.data.phantom, config.data.n_cases, seed, workers=config.workers)
    return split_dataset(cases, config.data.split)


def training_weights(config: Config, cases: Sequence[CaseBundle]) -> LabelWeights:
    if config.train.label_weights == "reference":
        return reference_label_weights(cases[0].labels.schema)
    return label_weights_from_training(cases)


def train_segmenter(spec: NetworkSpec, train_cases: Sequence[CaseBundle], val_cases: Sequence[CaseBundle],
                    schema: LabelSchema, weights: LabelWeights, opt: OptimizerConfig,
                    aug: Optional[AugmentationPolicy] = None, seed: int = 0,
                    desc: Optional[str] = None) -> TrainedModel:
    model = build_model(spec)
    task = make_task(model, schema, weights)
    return train(model, train_cases, task, opt, aug, seed=seed, validation=list(val_cases) or None,
                 device=get_device(), desc=desc or spec.name)


def train_helper(kind: str, config: Config, train_cases: Sequence[CaseBundle],
                 val_cases: Sequence[CaseBundle] = (), seed: int = 0) -> TrainedModel:
    """Train one of the helper networks (synthesis, superres, registration, autoencoder)."""
    aux = config.train.auxiliary
    if kind == "synthesis":
        model = build_synthesis_net(1, width=aux.synthesis_width)
    elif kind == "superres":
        model = build_superres_net(2, aux.superres_width, aux.superres_blocks)
    elif kind == "registration":
        model = build_registration_net(aux.registration_width)
    elif kind == "autoencoder":
        model = build_autoencoder(aux.autoencoder_latent)
    else:
        raise DataError(f"unknown helper network {kind!r}")
    return train(model, train_cases, make_task(model), aux.optimizer, AugmentationPolicy.none(),
                 seed=derive_seed(seed, kind), validation=list(val_cases) or None, device=get_device(), desc=kind)


def evaluate(models: Sequence[TrainedModel], cases: Sequence[CaseBundle],
             schema: LabelSchema) -> Tuple[List[DiceReport], pd.DataFrame]:
    if not cases:
        raise DataError("no test cases to evaluate")
    reports = [dice_report(segment_case(models, c, schema), c.labels) for c in cases]
    return reports, summarize_reports(reports)


def _rows(study: str, variant: str, seed: int, cases, reports) -> List[Dict]:
    return [{"study": study, "variant": variant, "seed": seed, "case_id": c.meta.case_id,
             "dice": r.mean, "whole_dice": r.whole} for c, r in zip(cases, reports)]


def _score(models, cases, schema, study, variant, seed) -> List[Dict]:
    reports, _ = evaluate(models, cases, schema)
    return _rows(study, variant, seed, cases, reports)


def _architecture(config, base_spec, data, schema, weights, opt, seed):
    train_cases, val_cases, test_cases = data
    rows = []
    for arch in config.ablate.architectures:
        spec = base_spec.model_copy(update={"name": arch})
        model = train_segmenter(spec, train_cases, val_cases, schema, weights, opt,
                                seed=derive_seed(seed, "architecture", arch), desc=f"ablate {arch}")
        rows += _score([model], test_cases, schema, "architecture", arch, seed)
    return rows


def _resolution(config, base_spec, data, schema, weights, opt, seed):
    factor = config.ablate.degrade_factor
    rows = []
    for variant in ("hr", "lr"):
        if variant == "lr":
            data = tuple([degrade(c, factor) for c in split] for split in data)
        train_cases, val_cases, test_cases = data
        model = train_segmenter(base_spec, train_cases, val_cases, schema, weights, opt,
                                seed=derive_seed(seed, "resolution"), desc=f"ablate {variant}")
        rows += _score([model], test_cases, schema, "resolution", variant, seed)
    return rows


def _modality(config, base_spec, data, schema, weights, opt, seed):
    train_cases, val_cases, test_cases = data
    rows = []
    for mods in config.ablate.modalities:
        spec = base_spec.model_copy(update={"modalities": tuple(mods), "input_channels": len(mods)})
        model = train_segmenter(spec, train_cases, val_cases, schema, weights, opt,
                                seed=derive_seed(seed, "modality"), desc=f"ablate {'+'.join(mods)}")
        rows += _score([model], test_cases, schema, "modality", "+".join(mods), seed)
    return rows


def _ensemble(config, base_spec, data, schema, weights, opt, seed):
    train_cases, val_cases, test_cases = data
    library = AtlasLibrary.from_cases(train_cases, config.atlas.modality)
    n, fusion = config.atlas.n_cases, config.atlas.fusion
    registration = None
    if config.atlas.use_registration:
        registration = train_helper("registration", config, train_cases, val_cases, derive_seed(seed, "ensemble"))

    def with_priors(cases, leave_self_out):
        return attach_priors(cases, library, registration, n, fusion, config.atlas.modality, leave_self_out)

    train_a = with_priors(train_cases, config.atlas.leave_self_out)
    val_a, test_a = with_priors(val_cases, False), with_priors(test_cases, False)
    plain = train_segmenter(base_spec, train_cases, val_cases, schema, weights, opt,
                            seed=derive_seed(seed, "ensemble", "no-atlas"), desc="ablate no-atlas")
    atlas = train_segmenter(with_atlas_channel(base_spec), train_a, val_a, schema, weights, opt,
                            seed=derive_seed(seed, "ensemble", "atlas"), desc="ablate atlas")
    rows = _score([plain], test_a, schema, "ensemble", "no-atlas", seed)
    rows += _score([atlas], test_a, schema, "ensemble", "atlas", seed)
    rows += _score([plain, atlas], test_a, schema, "ensemble", "ensemble", seed)
    return rows


STUDIES = {
    "architecture": _architecture,
    "resolution": _resolution,
    "modality": _modality,
    "ensemble": _ensemble,
}

REFERENCE_VARIANT = {"architecture": "unet", "resolution": "lr", "modality": "T1", "ensemble": "no-atlas"}


def ablation_table(rows: pd.DataFrame) -> pd.DataFrame:
    """Mean/std Dice per study variant, with a paired test against the study's reference variant."""
    out = []
    for (study, variant), group in rows.groupby(["study", "variant"], sort=False):
        entry = {"study": study, "variant": variant, "n": len(group),
                 "mean_dice": group["dice"].mean(), "std_dice": group["dice"].std(ddof=0),
                 "mean_whole_dice": group["whole_dice"].mean(), "p_value": None}
        ref = REFERENCE_VARIANT.get(study)
        ref_rows = rows[(rows["study"] == study) & (rows["variant"] == ref)]
        if variant != ref and len(ref_rows):
            paired = group.merge(ref_rows, on=["seed", "case_id"], suffixes=("", "_ref"))
            try:
                entry["p_value"] = wilcoxon_signed_rank(paired["dice"], paired["dice_ref"]).p_value
            except DataError as exc:
                logger.warning("no paired test for %s/%s: %s", study, variant, exc)
        out.append(entry)
    return pd.DataFrame(out)


def ablate(config: Config) -> Tuple[pd.DataFrame, pd.DataFrame]:
    """Per-case Dice rows and the summary table over all seeds and studies."""
    rows: List[Dict] = []
    for seed in config.ablate.seeds:
        data = phantom_splits(config, seed)
        schema = config.data.phantom.schema
        weights = training_weights(config, data[0])
        base_spec = config.model.network_spec(schema.n_labels).model_copy(update={"width": config.ablate.width})
        for study in config.ablate.studies:
            logger.info("ablation %s, seed %d", study, seed)
            rows += STUDIES[study](config, base_spec, data, schema, weights, config.ablate.optimizer, seed)
    frame = pd.DataFrame(rows)
    return frame, ablation_table(frame)
