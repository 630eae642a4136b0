from .data import DataError, SeriesTable, clean, ingest, resample
from .experiment import load_config, prepare, run_experiment
from .features import FeatureSpec, Thresholds, build_features, design_matrix
from .windows import WindowError, WindowPlan, plan_windows

__all__ = [
    "DataError",
    "FeatureSpec",
    "SeriesTable",
    "Thresholds",
    "WindowError",
    "WindowPlan",
    "build_features",
    "clean",
    "design_matrix",
    "ingest",
    "load_config",
    "plan_windows",
    "prepare",
    "resample",
    "run_experiment",
]
