"""Whole-slide-image survival analysis under multiple instance learning.

Per-slide patch-feature bags go in; censoring-aware training of four MIL
heads and cross-validated concordance indices come out. Everything runs
on an internal reverse-mode autodiff core for full determinism.
"""

__version__ = "0.1.0"

from .autodiff import Tape, Tensor, backward, set_debug_checks
from .checkpoint import load_checkpoint, save_checkpoint
from .cohort import BinEdges, FoldSplit, discretize, split_kfold, synth_cohort
from .cohort_types import PatientRecord
from .errors import MilsurvError
from .features import (
    EnsembleFeature,
    FeatureMatrix,
    Manifest,
    concat_ensemble,
    load_bag,
    load_manifest,
    read_features,
    register_extractor,
    write_features,
)
from .gradcheck import grad_check
from .heads import HeadConfig, MilHead, TransmilConfig, build_head, head_config, parameter_count
from .rng import Rng
from .survival import SurvivalOutput, concordance_index, nll_loss, risk_score, survival_output
from .training import (
    Adam,
    EarlyStopper,
    FoldResult,
    ReportTable,
    TrainConfig,
    emit_report,
    preset_config,
    run_cv,
    train_fold,
)

__all__ = [
    "Adam",
    "BinEdges",
    "EarlyStopper",
    "EnsembleFeature",
    "FeatureMatrix",
    "FoldResult",
    "FoldSplit",
    "HeadConfig",
    "Manifest",
    "MilHead",
    "MilsurvError",
    "PatientRecord",
    "ReportTable",
    "Rng",
    "SurvivalOutput",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TransmilConfig",
    "backward",
    "build_head",
    "concat_ensemble",
    "concordance_index",
    "discretize",
    "emit_report",
    "grad_check",
    "head_config",
    "load_bag",
    "load_checkpoint",
    "load_manifest",
    "nll_loss",
    "parameter_count",
    "preset_config",
    "read_features",
    "register_extractor",
    "risk_score",
    "run_cv",
    "save_checkpoint",
    "set_debug_checks",
    "split_kfold",
    "survival_output",
    "synth_cohort",
    "train_fold",
    "write_features",
]
