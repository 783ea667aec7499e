"""Fairness-aware causal VAEs, baselines, semi-synthetic IHDP-style data and evaluation.

Modules: ``diffcore`` (numpy autodiff, Adam, seeded noise), ``datagen``,
``models``, ``effects``, ``evaluate`` and ``harness`` (config, training,
sweeps, reports). The command line lives in ``fcvae.cli``.
"""
from .datagen import DataError, DatasetBundle, GenConfig, generate_ihdp, read_bundle_csv, write_bundle_csv
from .diffcore import NoiseStream
from .effects import EffectEstimates, estimate_effects, true_effects
from .evaluate import MetricsRow, accuracy_gap, pehe, regret
from .harness import ConfigError, ExperimentConfig, aggregate, load_config, parse_config, run_single_seed, sweep, train
from .models import MODEL_KINDS, Architecture, build_model, load_checkpoint, save_checkpoint

__version__ = "0.1.0"

__all__ = [
    "MODEL_KINDS", "Architecture", "ConfigError", "DataError", "DatasetBundle", "EffectEstimates",
    "ExperimentConfig", "GenConfig", "MetricsRow", "NoiseStream", "accuracy_gap", "aggregate",
    "build_model", "estimate_effects", "generate_ihdp", "load_checkpoint", "load_config", "parse_config",
    "pehe", "read_bundle_csv", "regret", "run_single_seed", "save_checkpoint", "sweep", "train",
    "true_effects", "write_bundle_csv",
]
