"""Joint fair representation and classifier learning for tabular data."""

from .data import Dataset, FeatureLayout, TabularEncoder, load_adult, load_bank, split
from .estimator import FairNNClassifier
from .metrics import FairnessReport, evaluate, fairness_report

__version__ = "0.1.0"

__all__ = [
    "Dataset",
    "FairNNClassifier",
    "FairnessReport",
    "FeatureLayout",
    "TabularEncoder",
    "evaluate",
    "fairness_report",
    "load_adult",
    "load_bank",
    "split",
]
