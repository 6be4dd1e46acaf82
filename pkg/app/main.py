"""
Command-line entry point for the malaria cell toolkit.

Usage: python -m app.main [global flags] <command> [flags]
"""
import argparse
import json
import logging
import os
import sys
from datetime import datetime
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

from pydantic import ValidationError

from .config import RunConfig, settings, write_provenance
from .exceptions import MalariaToolkitError, ParameterError

logger = logging.getLogger(__name__)

THREAD_VARIABLES = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")
LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'


def configure_threads(threads: int) -> None:
    """Cap numeric-library worker threads; 0 leaves the defaults alone."""
    if threads <= 0:
        return
    for variable in THREAD_VARIABLES:
        os.environ[variable] = str(threads)
    if "numpy" in sys.modules:
        logger.debug(f"numpy already loaded; thread cap {threads} applies to pools created from now on")


def make_run_dir(root: str, command: str, run_name: Optional[str] = None) -> Path:
    """<root>/<command>-<YYYYmmdd-HHMMSS> unless an explicit run name is given."""
    name = run_name or f"{command}-{datetime.now().strftime('%Y%m%d-%H%M%S')}"
    path = Path(root) / name
    path.mkdir(parents=True, exist_ok=True)
    return path


def _validation_line(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(part) for part in item['loc']) or 'config'}: {item['msg']}" for item in error.errors()
    )


def _load_data(run: RunConfig, input_size: Optional[int] = None):
    from .services.harness import load_experiment_data
    from .services.manifest import load_manifest

    if not run.manifest:
        raise ParameterError("No manifest given; pass --manifest or set MALARIA_MANIFEST")
    return load_experiment_data(load_manifest(run.manifest), input_size or run.input_size)


def _split_rows(run: RunConfig, manifest, split: str) -> List[int]:
    from .services.harness import split_80_10_10

    if split == "all":
        return list(range(len(manifest)))
    plan = split_80_10_10(manifest, run.split_seed, run.patient_disjoint)
    return getattr(plan, split)


def _write_evaluation(report, records, out_dir: Path) -> None:
    import pandas as pd

    from .services.evaluation import report_row, report_to_text
    from .services.harness import write_table

    (out_dir / "report.txt").write_text(report_to_text(report))
    write_table(pd.DataFrame([report_row(report)]), out_dir / "metrics.csv")
    write_table(pd.DataFrame([r.model_dump() for r in records]), out_dir / "predictions.csv", float_format=None)
    print(report_to_text(report), end="")


def cmd_synth(args, run: RunConfig, out_dir: Optional[Path]) -> int:
    from .services.synthetic import write_synthetic_dataset

    write_synthetic_dataset(args.dest, n=args.count, size=args.size, seed=run.seed, task=args.task, patients=args.patients)
    return 0


def cmd_prepare(args, run: RunConfig, out_dir: Path) -> int:
    from .services.manifest import MANIFEST_FILE, load_patient_map, prepare_dataset

    patients = load_patient_map(args.patients) if args.patients else None
    manifest, skipped = prepare_dataset(args.raw_dir, out_dir, run.input_size, patients)
    print(f"manifest: {out_dir / MANIFEST_FILE} ({len(manifest)} rows, {skipped} skipped)")
    return 0


def cmd_train(args, run: RunConfig, out_dir: Path) -> int:
    from .services.evaluation import report_to_text
    from .services.harness import run_experiment, split_80_10_10

    data = _load_data(run)
    plan = split_80_10_10(data.manifest, run.split_seed, run.patient_disjoint)
    (out_dir / "split.json").write_text(json.dumps(plan.model_dump(), sort_keys=True) + "\n")
    result = run_experiment(data, plan.train, plan.val, plan.test, run.to_experiment_config(), out_dir)
    print(report_to_text(result.reports["test"]), end="")
    return 0


def cmd_eval(args, run: RunConfig, out_dir: Path) -> int:
    from .services.checkpoint import load_checkpoint
    from .services.evaluation import false_case_report
    from .services.harness import CheckpointPredictor, evaluate_checkpoint, load_experiment_data
    from .services.manifest import load_manifest

    predictor = CheckpointPredictor.from_checkpoint(load_checkpoint(args.checkpoint))
    if not run.manifest:
        raise ParameterError("No manifest given; pass --manifest or set MALARIA_MANIFEST")
    manifest = load_manifest(run.manifest)
    rows = _split_rows(run, manifest, args.split)
    data = load_experiment_data(manifest.subset(rows), predictor.input_size)
    report, records = evaluate_checkpoint(predictor, data)
    _write_evaluation(report, records, out_dir)
    if args.false_cases:
        false_case_report(records, {str(p): str(p) for p in data.ids}, out_dir / "false_cases")
    return 0


def cmd_cv(args, run: RunConfig, out_dir: Path) -> int:
    from .services.harness import run_cv, split_80_10_10

    data = _load_data(run)
    pool = None
    if args.pool == "train":
        pool = split_80_10_10(data.manifest, run.split_seed, run.patient_disjoint).train
    result = run_cv(
        data, run.to_experiment_config(), k=run.folds, seed=run.split_seed,
        pool=pool, validation_fraction=run.validation_fraction, out_dir=out_dir,
    )
    print(result.table.to_string(index=False))
    return 0


def cmd_holdout(args, run: RunConfig, out_dir: Path) -> int:
    from .services.harness import run_holdout

    data = _load_data(run)
    result = run_holdout(
        data, run.to_experiment_config(), repeats=run.repeats, seed=run.split_seed,
        patient_disjoint=run.patient_disjoint, out_dir=out_dir,
    )
    print(result.table.to_string(index=False))
    return 0


def cmd_ablate(args, run: RunConfig, out_dir: Path) -> int:
    from .services.harness import freeze_sweep, pivot_ablation, preprocessing_grid, run_ablation, split_80_10_10, write_table

    data = _load_data(run)
    base = run.to_experiment_config()
    if args.grid == "freeze":
        cells = freeze_sweep(base, args.freeze_ranges)
    else:
        cells = preprocessing_grid(base, models=args.models, modes=args.modes, heads=args.heads)
    plan = split_80_10_10(data.manifest, run.split_seed, run.patient_disjoint)
    table = run_ablation(data, cells, plan, out_dir)
    if args.grid == "preprocessing":
        grid = pivot_ablation(table, index=["model", "head", "preprocess"], columns="stain_normalize")
        write_table(grid.reset_index(), out_dir / "ablation_grid.csv")
    print(table.to_string(index=False))
    return 0


def cmd_ensemble(args, run: RunConfig, out_dir: Path) -> int:
    from .services.checkpoint import load_checkpoint
    from .services.evaluation import weights_from_accuracy
    from .services.harness import CheckpointPredictor, ensemble_checkpoints, load_experiment_data
    from .services.manifest import load_manifest

    predictors = [CheckpointPredictor.from_checkpoint(load_checkpoint(path)) for path in args.checkpoints]
    sizes = {p.input_size for p in predictors}
    if len(sizes) != 1:
        raise ParameterError(f"Ensemble members take different input sizes {sorted(sizes)}")
    weights = args.weights
    if args.weight_by_accuracy:
        accuracies = [p.val_accuracy for p in predictors]
        if any(a is None for a in accuracies):
            raise ParameterError("Every checkpoint needs a val_acc entry to weight by accuracy")
        weights = weights_from_accuracy(accuracies).tolist()
    if not run.manifest:
        raise ParameterError("No manifest given; pass --manifest or set MALARIA_MANIFEST")

    manifest = load_manifest(run.manifest)
    data = load_experiment_data(manifest.subset(_split_rows(run, manifest, args.split)), sizes.pop())
    report, records = ensemble_checkpoints(predictors, data, weights)
    _write_evaluation(report, records, out_dir)
    return 0


def cmd_tta(args, run: RunConfig, out_dir: Path) -> int:
    from .services.checkpoint import load_checkpoint
    from .services.harness import CheckpointPredictor, load_experiment_data, tta_checkpoint
    from .services.manifest import load_manifest

    predictor = CheckpointPredictor.from_checkpoint(load_checkpoint(args.checkpoint))
    if not run.manifest:
        raise ParameterError("No manifest given; pass --manifest or set MALARIA_MANIFEST")
    manifest = load_manifest(run.manifest)
    data = load_experiment_data(manifest.subset(_split_rows(run, manifest, args.split)), predictor.input_size)
    report, records = tta_checkpoint(predictor, data, run.policy(), seed=run.seed, k=run.tta_copies)
    _write_evaluation(report, records, out_dir)
    return 0


def cmd_diagnose(args, run: RunConfig, out_dir: Path) -> int:
    import pandas as pd

    from .models.malaria_models import PredictionRecord
    from .services.evaluation import patient_diagnose
    from .services.harness import write_table
    from .services.manifest import load_manifest, load_patient_map

    if not run.manifest:
        raise ParameterError("No manifest given; pass --manifest or set MALARIA_MANIFEST")
    manifest = load_manifest(run.manifest)
    if args.patients:
        manifest = manifest.with_patients(load_patient_map(args.patients))
    frame = pd.read_csv(args.predictions, dtype={"sample_id": str})
    records = [PredictionRecord(sample_id=r.sample_id, y=int(r.y), p=float(r.p)) for r in frame.itertuples()]
    truth = None
    if args.truth:
        truth_frame = pd.read_csv(args.truth, dtype={"patient_id": str})
        truth = dict(zip(truth_frame["patient_id"], truth_frame["label"].astype(int)))
    table, summary = patient_diagnose(records, dict(zip(manifest.paths, manifest.patients)), truth)
    write_table(table, out_dir / "patients.csv")
    (out_dir / "patient_summary.json").write_text(json.dumps(summary, sort_keys=True) + "\n")
    print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_gradcheck(args, run: RunConfig, out_dir: Path) -> int:
    import pandas as pd

    from .services.gradcheck import gradcheck_table, run_gradcheck
    from .services.harness import write_table

    rows = run_gradcheck(instances=args.instances, seed=run.seed)
    write_table(pd.DataFrame([row.model_dump() for row in rows]), out_dir / "gradcheck.csv")
    print(gradcheck_table(rows), end="")
    return 0 if all(row.passed for row in rows) else 1


def _global_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="KEY=value config file (MALARIA_* keys)", default=argparse.SUPPRESS)
    parser.add_argument("--seed", type=int, help="Run seed", default=argparse.SUPPRESS)
    parser.add_argument("--out", help="Output root directory", default=argparse.SUPPRESS)
    parser.add_argument("--threads", type=int, help="Cap numeric worker threads (1 = sequential)", default=argparse.SUPPRESS)
    parser.add_argument("--run-name", help="Output subdirectory name instead of a timestamp", default=argparse.SUPPRESS)
    parser.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS)


def _experiment_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest")
    parser.add_argument("--preset", choices=["custom", "vgg-baseline", "vgg-baseline-128"])
    parser.add_argument("--model", choices=["custom", "vgg-baseline"])
    parser.add_argument("--input-size", dest="input_size", type=int)
    parser.add_argument("--width-divisor", dest="width_divisor", type=int)
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--batch", dest="batch_size", type=int)
    parser.add_argument("--lr", type=float)
    parser.add_argument("--freeze", help="none, all or L<a>-L<b>")
    parser.add_argument("--pretrained", help="Checkpoint whose weights initialise the model")
    parser.add_argument("--no-dropout", dest="dropout", action="store_false", default=None)
    parser.add_argument("--preprocess", choices=["rescale", "standardize", "mean_normalize"])
    parser.add_argument("--stain-normalize", dest="stain_normalize", action="store_true", default=None)
    parser.add_argument("--augment", choices=["none", "online", "offline"])
    parser.add_argument("--augment-copies", dest="augment_copies", type=int)
    parser.add_argument("--augment-policy", dest="augment_policy", choices=["default", "flips", "identity"])
    parser.add_argument("--head", choices=["softmax", "svm"])
    parser.add_argument("--svm-c", dest="svm_c", type=float)
    parser.add_argument("--svm-gamma", dest="svm_gamma", type=float)
    parser.add_argument("--split-seed", dest="split_seed", type=int)
    parser.add_argument("--patient-disjoint", dest="patient_disjoint", action="store_true", default=None)


def _eval_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest")
    parser.add_argument("--split", choices=["all", "train", "val", "test"], default="all")
    parser.add_argument("--split-seed", dest="split_seed", type=int)
    parser.add_argument("--patient-disjoint", dest="patient_disjoint", action="store_true", default=None)


COMMANDS: Dict[str, Callable] = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "cv": cmd_cv,
    "holdout": cmd_holdout,
    "ablate": cmd_ablate,
    "ensemble": cmd_ensemble,
    "tta": cmd_tta,
    "diagnose": cmd_diagnose,
    "gradcheck": cmd_gradcheck,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="malaria-cells", description="Malaria cell image classification toolkit")
    _global_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="Write a synthetic two-folder image set")
    synth.add_argument("dest")
    synth.add_argument("--count", type=int, default=700)
    synth.add_argument("--size", type=int, default=32)
    synth.add_argument("--task", choices=["A", "B"], default="A")
    synth.add_argument("--patients", type=int, default=10)

    prepare = sub.add_parser("prepare", help="Index and resample a raw image directory")
    prepare.add_argument("raw_dir")
    prepare.add_argument("--input-size", dest="input_size", type=int)
    prepare.add_argument("--patients", help="path,patient_id override file")

    for name, text in (("train", "Train and evaluate on an 80:10:10 split"),
                       ("cv", "k-fold cross-validation"),
                       ("holdout", "Repeated 80:10:10 holdout"),
                       ("ablate", "Ablation grid")):
        command = sub.add_parser(name, help=text)
        _experiment_flags(command)
    sub.choices["cv"].add_argument("--folds", type=int)
    sub.choices["cv"].add_argument("--validation-fraction", dest="validation_fraction", type=float)
    sub.choices["cv"].add_argument("--pool", choices=["all", "train"], default="all")
    sub.choices["holdout"].add_argument("--repeats", type=int)
    ablate = sub.choices["ablate"]
    ablate.add_argument("--grid", choices=["preprocessing", "freeze"], default="preprocessing")
    ablate.add_argument("--models", nargs="+", default=["custom", "vgg-baseline"])
    ablate.add_argument("--modes", nargs="+", default=["rescale"])
    ablate.add_argument("--heads", nargs="+", default=["softmax"])
    ablate.add_argument("--freeze-ranges", dest="freeze_ranges", nargs="+", default=["all", "none", "L1-L8", "L1-L14", "L1-L16"])

    evaluate = sub.add_parser("eval", help="Evaluate a checkpoint on manifest rows")
    evaluate.add_argument("--checkpoint", required=True)
    evaluate.add_argument("--false-cases", dest="false_cases", action="store_true")
    _eval_flags(evaluate)

    ensemble = sub.add_parser("ensemble", help="Weighted ensemble of checkpoints")
    ensemble.add_argument("--checkpoints", nargs="+", required=True)
    ensemble.add_argument("--weights", nargs="+", type=float)
    ensemble.add_argument("--weight-by-accuracy", dest="weight_by_accuracy", action="store_true")
    _eval_flags(ensemble)

    tta = sub.add_parser("tta", help="Test-time augmentation of a checkpoint")
    tta.add_argument("--checkpoint", required=True)
    tta.add_argument("--copies", dest="tta_copies", type=int)
    tta.add_argument("--augment-policy", dest="augment_policy", choices=["default", "flips", "identity"])
    _eval_flags(tta)

    diagnose = sub.add_parser("diagnose", help="Patient-level diagnosis from cell predictions")
    diagnose.add_argument("--predictions", required=True)
    diagnose.add_argument("--manifest")
    diagnose.add_argument("--patients", help="path,patient_id override file")
    diagnose.add_argument("--truth", help="patient_id,label ground-truth file")

    gradcheck = sub.add_parser("gradcheck", help="Finite-difference check of every layer kind")
    gradcheck.add_argument("--instances", type=int, default=100)

    for command in sub.choices.values():
        _global_flags(command)
    return parser


def _run_overrides(args: argparse.Namespace) -> Dict[str, object]:
    values = vars(args)
    return {key: values[key] for key in RunConfig.model_fields if key in values and values[key] is not None}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    verbose = getattr(args, "verbose", False)
    logging.basicConfig(
        level=logging.DEBUG if verbose else getattr(logging, settings.log_level),
        format=LOG_FORMAT,
    )
    try:
        run = RunConfig.load(getattr(args, "config", None), **_run_overrides(args))
        configure_threads(run.threads)
        out_dir = None
        if args.command != "synth":
            out_dir = make_run_dir(run.out, args.command, getattr(args, "run_name", None))
            write_provenance(run, out_dir, args.command)
            logger.info(f"Writing {args.command} artifacts to {out_dir}")
        return COMMANDS[args.command](args, run, out_dir)
    except ValidationError as e:
        print(f"error: ValidationError: {_validation_line(e)}", file=sys.stderr)
        return 2
    except MalariaToolkitError as e:
        message = " ".join(str(e).split())
        print(f"error: {type(e).__name__}: {message}", file=sys.stderr)
        return 2
    except Exception:
        logger.exception(f"{args.command} failed")
        return 1


if __name__ == "__main__":
    sys.exit(main())
