"""Command-line entry point.

Usage: python -m thalseg <command> [--config PATH] [--seed N] [--out DIR] ...

Commands:
- phantom gen: synthetic thalamus cases (train/val/test, shifted pool, head)
- train: segmentation model(s), optionally the full pipeline bundle
- evaluate: Dice of saved models on the test split
- atlas build: subject-specific atlas prior for one target crop
- curriculum run: pseudo-label curriculum over the unlabeled pool
- segment: end-to-end pipeline on one or more T1 volumes
- report: volumetry report for a pipeline run
- normative fit: normative bounds from a population table or the run registry
- ablate: phantom ablation studies

Exit codes: 0 ok, 1 usage/config, 2 data, 3 numeric failure.
"""
import argparse
import json
import logging
import os
import sys
from typing import Dict, List, Optional

import pandas as pd

from . import __version__
from .atlas import AtlasLibrary, attach_priors, build_subject_atlas
from .base import derive_seed
from .config import Config, get_database_url, get_device, get_log_level, load_config
from .curriculum import run_curriculum
from .db import get_db, init_db
from .errors import EXIT_CODES, ConfigError, DataError, NumericError, ThalsegError
from .experiments import ablate, evaluate, phantom_splits, train_helper, train_segmenter, training_weights
from .models import load_checkpoint, save_checkpoint, with_atlas_channel
from .phantom import generate_head, generate_shifted_pool, make_template
from .pipeline import ModelBundle, run_many, run_pipeline, save_run
from .records import Run, finish_run, load_population, record_report, record_run
from .report import NormativeModel, build_report, fit_normative, write_report
from .volume_io import load_labels, load_volume, read_cases, save_volume, write_cases
from .volumes import CropBox

logger = logging.getLogger("thalseg")

MANIFEST = "manifest.json"


class ArgumentParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CODES["usage"], f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", default="out", help="output directory")


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(prog="thalseg", description="Thalamic nuclei segmentation")
    parser.add_argument("--version", action="version", version=f"thalseg {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=ArgumentParser)

    phantom = sub.add_parser("phantom").add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    gen = phantom.add_parser("gen", help="generate phantom data")
    _common(gen)
    gen.add_argument("--head", action="store_true", help="also write a whole-head phantom and template")

    p = sub.add_parser("train", help="train segmentation models")
    _common(p)
    p.add_argument("--data", required=True, help="directory written by 'phantom gen'")
    p.add_argument("--bundle", action="store_true", help="also train the helper networks and write a bundle")

    p = sub.add_parser("evaluate", help="Dice on the test split")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="checkpoint directory (segmenter*.pt)")

    atlas = sub.add_parser("atlas").add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    p = atlas.add_parser("build", help="atlas prior for a target crop")
    _common(p)
    p.add_argument("--library", required=True, help="case directory with T1 and labels")
    p.add_argument("--target", required=True, help="target T1 crop volume")
    p.add_argument("--registration", help="registration checkpoint")

    curr = sub.add_parser("curriculum").add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    p = curr.add_parser("run", help="pseudo-label curriculum")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True, help="checkpoint directory (segmenter*.pt)")
    p.add_argument("--stop-after", type=int, help="pause after this many iterations")

    p = sub.add_parser("segment", help="end-to-end pipeline on one or more T1 volumes")
    _common(p)
    p.add_argument("--input", required=True, nargs="+", help="one or more T1 volumes")
    p.add_argument("--bundle", required=True, help="model bundle directory")
    p.add_argument("--template", help="template volume (default: the pipeline config or a phantom template)")

    p = sub.add_parser("report", help="volumetry report of a segment run")
    _common(p)
    p.add_argument("--run", required=True, help="output directory of 'segment'")
    p.add_argument("--icv", type=float, help="ICV in mm3 (default: from the run)")
    p.add_argument("--normative", help="normative model JSON, or 'registry'")
    p.add_argument("--subject", default="subject")
    p.add_argument("--age", type=float)
    p.add_argument("--sex")

    norm = sub.add_parser("normative").add_subparsers(dest="action", required=True, parser_class=ArgumentParser)
    p = norm.add_parser("fit", help="fit normative bounds")
    _common(p)
    p.add_argument("--population", required=True, help="CSV (long or wide) or 'registry'")

    p = sub.add_parser("ablate", help="phantom ablation studies")
    _common(p)
    return parser


def _write_manifest(out: str, command: str, config: Config, outputs: Dict, extra: Optional[Dict] = None) -> str:
    os.makedirs(out, exist_ok=True)
    manifest = {
        "command": command,
        "thalseg": __version__,
        "seed": config.seed,
        "config": config.resolved(),
        "outputs": {k: os.path.relpath(v, out) if isinstance(v, str) else v for k, v in outputs.items()},
    }
    manifest.update(extra or {})
    path = os.path.join(out, MANIFEST)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _require(path: str) -> str:
    if not path or not os.path.exists(path):
        raise DataError(f"missing input: {path}")
    return path


def _splits(data_dir: str, schema):
    return [read_cases(_require(os.path.join(data_dir, name)), schema) for name in ("train", "val", "test")]


def _segmenters(models_dir: str) -> List:
    _require(models_dir)
    names = sorted(n for n in os.listdir(models_dir) if n.startswith("segmenter") and n.endswith(".pt"))
    if not names:
        raise DataError(f"no segmenter checkpoints in {models_dir}")
    return [load_checkpoint(os.path.join(models_dir, n), get_device()) for n in names]


def _with_priors(config: Config, cases, library, registration, leave_self_out: bool):
    reg = registration if config.atlas.use_registration else None
    return attach_priors(cases, library, reg, config.atlas.n_cases, config.atlas.fusion, config.atlas.modality,
                         leave_self_out)


def cmd_phantom_gen(args, config: Config) -> Dict:
    spec = config.data.phantom
    train, val, test = phantom_splits(config)
    seeds = {"base_seed": config.seed, "phantom_seed": spec.seed, "split": list(config.data.split)}
    outputs = {name: write_cases(cases, os.path.join(args.out, name), extra=dict(seeds, subset=name))
               for name, cases in (("train", train), ("val", val), ("test", test))}
    if config.data.pool_cases:
        pool = generate_shifted_pool(spec, config.data.pool_cases, config.seed, config.data.max_shift)
        outputs["pool"] = write_cases(pool, os.path.join(args.out, "pool"),
                                      extra=dict(seeds, subset="pool", max_shift=config.data.max_shift))
    if args.head:
        box = CropBox(tuple(config.pipeline.left_offset), tuple(config.pipeline.crop_extent))
        head = generate_head(spec, config.seed, left_box=box)
        outputs["head_t1"] = save_volume(os.path.join(args.out, "head", "t1.nii.gz"), head.t1_native)
        outputs["head_left"] = save_volume(os.path.join(args.out, "head", "left_labels.nii.gz"), head.left_labels)
        outputs["head_right"] = save_volume(os.path.join(args.out, "head", "right_labels.nii.gz"), head.right_labels)
        outputs["template"] = save_volume(os.path.join(args.out, "head", "template.nii.gz"),
                                          make_template(spec, left_box=box))
    return outputs


def _train_segmenters(config: Config, train, val, schema, registration=None):
    weights = training_weights(config, train)
    spec = config.model.network_spec(schema.n_labels)
    opt, aug = config.train.optimizer, config.train.augmentation
    models = []
    if config.model.ensemble in ("none", "both"):
        models.append(train_segmenter(spec, train, val, schema, weights, opt, aug,
                                      seed=derive_seed(config.seed, "segmenter", "plain"), desc="segmenter"))
    if config.model.ensemble in ("atlas", "both"):
        library = AtlasLibrary.from_cases(train, config.atlas.modality)
        train_a = _with_priors(config, train, library, registration, config.atlas.leave_self_out)
        val_a = _with_priors(config, val, library, registration, False)
        models.append(train_segmenter(with_atlas_channel(spec), train_a, val_a, schema, weights, opt, aug,
                                      seed=derive_seed(config.seed, "segmenter", "atlas"), desc="atlas segmenter"))
    return models


def cmd_train(args, config: Config) -> Dict:
    schema = config.data.phantom.schema
    train, val, _ = _splits(args.data, schema)
    registration = None
    if args.bundle or (config.model.ensemble != "none" and config.atlas.use_registration):
        registration = train_helper("registration", config, train, val, config.seed)
    models = _train_segmenters(config, train, val, schema, registration)
    model_dir = os.path.join(args.out, "models")
    outputs = {f"segmenter{i}": save_checkpoint(m, os.path.join(model_dir, f"segmenter{i}.pt"))
               for i, m in enumerate(models)}
    if registration is not None:
        outputs["registration"] = save_checkpoint(registration, os.path.join(model_dir, "registration.pt"))
    if args.bundle:
        bundle = ModelBundle(
            superres=train_helper("superres", config, train, val, config.seed),
            synthesis=train_helper("synthesis", config, train, val, config.seed),
            segmenters=models,
            registration=registration,
            library=AtlasLibrary.from_cases(train, config.atlas.modality),
            schema=schema,
        )
        outputs["bundle"] = bundle.save(os.path.join(args.out, "bundle"))
    return outputs


def cmd_evaluate(args, config: Config) -> Dict:
    schema = config.data.phantom.schema
    train, _, test = _splits(args.data, schema)
    models = _segmenters(args.models)
    if any(m.spec.uses_atlas for m in models):
        registration = None
        reg_path = os.path.join(args.models, "registration.pt")
        if os.path.exists(reg_path):
            registration = load_checkpoint(reg_path, get_device())
        test = _with_priors(config, test, AtlasLibrary.from_cases(train, config.atlas.modality), registration, False)
    reports, summary = evaluate(models, test, schema)
    os.makedirs(args.out, exist_ok=True)
    per_case = pd.DataFrame([dict(case_id=c.meta.case_id, **r.as_dict()) for c, r in zip(test, reports)])
    outputs = {"dice_cases": os.path.join(args.out, "dice_cases.csv"),
               "dice_summary": os.path.join(args.out, "dice_summary.csv")}
    per_case.to_csv(outputs["dice_cases"], index=False)
    summary.to_csv(outputs["dice_summary"], index=False)
    mean = float(sum(r.mean for r in reports) / len(reports))
    print(json.dumps({"mean_dice": round(mean, 6), "n_cases": len(reports)}))
    return outputs


def cmd_atlas_build(args, config: Config) -> Dict:
    library = AtlasLibrary.from_cases(read_cases(_require(args.library), config.data.phantom.schema),
                                      config.atlas.modality)
    target = load_volume(_require(args.target))
    registration = load_checkpoint(_require(args.registration), get_device()) if args.registration else None
    prior = build_subject_atlas(library, target, registration, config.atlas.n_cases, config.atlas.fusion,
                                workers=config.workers)
    outputs = {"atlas": save_volume(os.path.join(args.out, "atlas.nii.gz"), prior.labels)}
    outputs["provenance"] = os.path.join(args.out, "atlas.json")
    with open(outputs["provenance"], "w", encoding="utf-8") as fh:
        json.dump(prior.provenance, fh, indent=2, sort_keys=True)
    return outputs


def cmd_curriculum_run(args, config: Config) -> Dict:
    schema = config.data.phantom.schema
    train, _, test = _splits(args.data, schema)
    pool = read_cases(_require(os.path.join(args.data, "pool")), schema)
    ensemble = _segmenters(args.models)
    if any(m.spec.uses_atlas for m in ensemble):
        raise DataError("the curriculum fine-tunes segmenters without the atlas channel")
    state_dir = os.path.join(args.out, "curriculum")
    ae_path = os.path.join(state_dir, "autoencoder.pt")
    if os.path.exists(ae_path):
        autoencoder = load_checkpoint(ae_path, get_device())
    else:
        autoencoder = train_helper("autoencoder", config, list(train) + list(pool), (), config.seed)
        save_checkpoint(autoencoder, ae_path)
    monitor = [c for c in pool if c.labels is not None][-max(1, len(pool) // 10):]
    state, tuned = run_curriculum(train, pool, ensemble, autoencoder, config.curriculum, schema,
                                  training_weights(config, train), seed=config.seed, state_dir=state_dir,
                                  seed_test=test, monitor=monitor, stop_after=args.stop_after)
    outputs = {"state": os.path.join(state_dir, "state.json"), "metrics": os.path.join(state_dir, "metrics.jsonl")}
    model_dir = os.path.join(args.out, "models")
    for i, m in enumerate(tuned):
        outputs[f"segmenter{i}"] = save_checkpoint(m, os.path.join(model_dir, f"segmenter{i}.pt"))
    return outputs


def cmd_segment(args, config: Config) -> Dict:
    bundle = ModelBundle.load(_require(args.bundle), get_device())
    volumes = [load_volume(_require(path)) for path in args.input]
    template = None
    if args.template:
        template = load_volume(_require(args.template))
    elif not config.pipeline.template:
        box = CropBox(tuple(config.pipeline.left_offset), tuple(config.pipeline.crop_extent))
        template = make_template(config.data.phantom, native_grid=volumes[0].shape, left_box=box)
    if len(volumes) == 1:
        run = run_pipeline(volumes[0], bundle, config.pipeline, template, workdir=os.path.join(args.out, "work"),
                           seed=config.seed)
        return save_run(run, args.out)
    # several inputs: one output directory per input file, named after it
    outs = [os.path.join(args.out, os.path.basename(path).split(".")[0]) for path in args.input]
    if len(set(outs)) != len(outs):
        raise DataError("input file names must be distinct")
    runs = run_many(volumes, bundle, config.pipeline, template,
                    workdirs=[os.path.join(out, "work") for out in outs], seed=config.seed)
    return {os.path.basename(out): save_run(run, out)["run"] for out, run in zip(outs, runs)}


def _population(source: str, unit: str):
    if source == "registry":
        with get_db() as session:
            return load_population(session, unit)
    return pd.read_csv(_require(source))


def cmd_report(args, config: Config) -> Dict:
    run_json = os.path.join(_require(args.run), "run.json")
    with open(_require(run_json), "r", encoding="utf-8") as fh:
        run = json.load(fh)
    left = load_labels(_require(os.path.join(args.run, "left_labels.nii.gz")))
    right = load_labels(_require(os.path.join(args.run, "right_labels.nii.gz")), left.schema)
    icv = args.icv if args.icv is not None else run.get("icv_mm3")
    normative = None
    if args.normative == "registry":
        rc = config.report
        normative = fit_normative(_population("registry", rc.unit), rc.window, rc.step, rc.lower_pct,
                                  rc.upper_pct, min_per_sex=rc.min_per_sex, unit=rc.unit)
    elif args.normative:
        normative = NormativeModel.load(_require(args.normative))
    report = build_report(left, right, icv, args.subject, args.age, args.sex, normative,
                          provenance={"run": run.get("provenance", {})})
    outputs = write_report(report, args.out)
    run_id = getattr(args, "registry_run_id", None)
    with get_db() as session:
        record_report(session, report, session.get(Run, run_id) if run_id is not None else None)
    return outputs


def cmd_normative_fit(args, config: Config) -> Dict:
    rc = config.report
    model = fit_normative(_population(args.population, rc.unit), rc.window, rc.step, rc.lower_pct, rc.upper_pct,
                          min_per_sex=rc.min_per_sex, unit=rc.unit)
    return {"normative": model.save(os.path.join(args.out, "normative.json"))}


def cmd_ablate(args, config: Config) -> Dict:
    rows, table = ablate(config)
    os.makedirs(args.out, exist_ok=True)
    outputs = {"rows": os.path.join(args.out, "ablation_cases.csv"), "table": os.path.join(args.out, "ablation.csv")}
    rows.to_csv(outputs["rows"], index=False)
    table.to_csv(outputs["table"], index=False)
    print(table.to_string(index=False))
    return outputs


COMMANDS = {
    ("phantom", "gen"): cmd_phantom_gen,
    ("train", None): cmd_train,
    ("evaluate", None): cmd_evaluate,
    ("atlas", "build"): cmd_atlas_build,
    ("curriculum", "run"): cmd_curriculum_run,
    ("segment", None): cmd_segment,
    ("report", None): cmd_report,
    ("normative", "fit"): cmd_normative_fit,
    ("ablate", None): cmd_ablate,
}


def run_command(args) -> int:
    key = (args.command, getattr(args, "action", None))
    name = " ".join(k for k in key if k)
    overrides = {"seed": args.seed} if args.seed is not None else None
    config = load_config(args.config, overrides)
    os.makedirs(args.out, exist_ok=True)
    init_db(get_database_url(args.out))
    with get_db() as session:
        record = record_run(session, name, config.seed, config.resolved(), os.path.abspath(args.out))
        args.registry_run_id = record.id
        try:
            outputs = COMMANDS[key](args, config)
        except Exception:
            finish_run(session, record, "failed")
            raise
        finish_run(session, record, "ok")
    _write_manifest(args.out, name, config, outputs)
    logger.info("%s finished; outputs under %s", name, args.out)
    return EXIT_CODES["ok"]


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=get_log_level(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return run_command(args)
    except ConfigError as exc:
        logger.error("invalid configuration: %s", exc)
        return exc.exit_code
    except ThalsegError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except (FloatingPointError, RuntimeError) as exc:
        logger.exception("numeric failure: %s", exc)
        return NumericError.exit_code
    except OSError as exc:
        logger.exception("i/o failure: %s", exc)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
