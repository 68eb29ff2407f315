"""Neural Fine-Gray: competing-risks cumulative incidence with exact likelihoods."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.1.0"

from .autodiff import NumericDomainError, Tape, TapeUsageError, Var
from .data import SurvivalDataset, SyntheticSpec, analytic_cif, generate_synthetic, load_csv
from .metrics import MetricReport, MetricUnavailable, auc_td, brier_td, c_index_td
from .model import NfgModel
from .objectives import SurvivalBatch, cause_specific_nll, competing_nll
from .trainer import CvConfig, HyperParams, TrainConfig, cross_validate, random_search, train

__all__ = [
    "CvConfig", "HyperParams", "MetricReport", "MetricUnavailable", "NfgModel",
    "NumericDomainError", "SurvivalBatch", "SurvivalDataset", "SyntheticSpec", "Tape",
    "TapeUsageError", "TrainConfig", "Var", "analytic_cif", "auc_td", "brier_td", "c_index_td",
    "cause_specific_nll", "competing_nll", "cross_validate", "generate_synthetic", "load_csv",
    "random_search", "train", "__version__",
]
