"""Multiplicative quasi-instrumental variable (MQIV) estimation of the ATT."""

from mqiv.data import ColumnMapping, Dataset, FoldAssignment, load_csv, save_csv, split_folds, validate
from mqiv.errors import DataError, EstimationError, MqivError, NuisanceError
from mqiv.estimators import (
    EstimateResult,
    confidence_interval,
    estimate_direct_effect_treated,
    estimate_eif_mqiv,
    estimate_plugin_mqiv,
    estimate_plugin_single_arm,
    estimate_plugin_wald,
    robustness_probe,
    run_estimators,
)
from mqiv.learners import LearnerSpec, fit, predict
from mqiv.nuisance import derive, fit_raw_nuisances, oracle_spec
from mqiv.study import McConfig, McReport, run_study

__version__ = "0.1.0"

__all__ = [
    "ColumnMapping",
    "confidence_interval",
    "DataError",
    "Dataset",
    "derive",
    "estimate_direct_effect_treated",
    "estimate_eif_mqiv",
    "estimate_plugin_mqiv",
    "estimate_plugin_single_arm",
    "estimate_plugin_wald",
    "EstimateResult",
    "EstimationError",
    "fit",
    "fit_raw_nuisances",
    "FoldAssignment",
    "LearnerSpec",
    "load_csv",
    "McConfig",
    "McReport",
    "MqivError",
    "NuisanceError",
    "oracle_spec",
    "predict",
    "robustness_probe",
    "run_estimators",
    "run_study",
    "save_csv",
    "split_folds",
    "validate",
]
