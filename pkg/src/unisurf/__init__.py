"""Unified surface-defect detection across supervision regimes.

A discriminative detector over frozen pretrained features: latent-space
synthetic anomalies (thresholded gradient noise masks + region-limited
Gaussian perturbations) train a per-location segmentation head and a
global classification head, with a per-image gate that makes the same
model trainable from normal-only data up to fully pixel-annotated data.
"""

from .config import RunConfig, config_from_dict, load_config, save_resolved_config
from .datasets import (
    KIND_FULL,
    KIND_NORMAL,
    KIND_WEAK,
    LabelledSample,
    MixedPlan,
    apply_regime,
    load_dataset,
    make_folds,
    read_manifest,
    write_manifest,
)
from .evaluation import evaluate_model
from .metrics import EvalReport, aupro, auroc, average_precision, bench_latency
from .model import DefectModel, Prediction, load_model
from .toydata import generate_toy_dataset
from .trainer import balance_epoch, build_optimizer, fit, train_step

__version__ = "0.1.0"

__all__ = [
    "RunConfig",
    "config_from_dict",
    "load_config",
    "save_resolved_config",
    "LabelledSample",
    "MixedPlan",
    "KIND_NORMAL",
    "KIND_WEAK",
    "KIND_FULL",
    "load_dataset",
    "make_folds",
    "apply_regime",
    "read_manifest",
    "write_manifest",
    "DefectModel",
    "Prediction",
    "load_model",
    "EvalReport",
    "auroc",
    "average_precision",
    "aupro",
    "bench_latency",
    "evaluate_model",
    "generate_toy_dataset",
    "build_optimizer",
    "balance_epoch",
    "train_step",
    "fit",
    "__version__",
]
