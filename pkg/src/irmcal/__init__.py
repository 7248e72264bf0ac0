"""Invariance learning objectives on environment-shifted MNIST, judged by calibration."""
__version__ = "0.1.0"

from .calibration import PredictionSet, ace, accuracy, ece, nll
from .config import ExperimentConfig, load_config
from .estimator import IRMClassifier
from .harness import early_stop_threshold_search, grid_search, train_run
from .objectives import MethodConfig

__all__ = ["IRMClassifier", "ExperimentConfig", "MethodConfig", "PredictionSet", "ace", "accuracy",
           "early_stop_threshold_search", "ece", "grid_search", "load_config", "nll", "train_run"]
