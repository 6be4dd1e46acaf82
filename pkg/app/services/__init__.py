from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .harness import (
    CheckpointPredictor,
    ExperimentData,
    kfold_plan,
    run_ablation,
    run_cv,
    run_experiment,
    run_holdout,
    split_80_10_10,
)
from .manifest import Manifest, load_manifest, prepare_dataset
from .networks import ModelGraph, build_custom_net, build_model, build_vgg_baseline, set_trainable
from .preprocessing import Preprocessor
from .training import evaluate, fit

__all__ = [
    "Checkpoint",
    "CheckpointPredictor",
    "ExperimentData",
    "Manifest",
    "ModelGraph",
    "Preprocessor",
    "build_custom_net",
    "build_model",
    "build_vgg_baseline",
    "evaluate",
    "fit",
    "kfold_plan",
    "load_checkpoint",
    "load_manifest",
    "prepare_dataset",
    "run_ablation",
    "run_cv",
    "run_experiment",
    "run_holdout",
    "save_checkpoint",
    "set_trainable",
    "split_80_10_10",
]
