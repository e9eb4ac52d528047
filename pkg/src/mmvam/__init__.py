"""Sparse EM estimation of longitudinal multiple-membership value-added models.

Five covariance structures are supported (GP.R, rGP.R, GP.G, VP, CP).  The
usual flow is ingest -> design -> emcore.run_em -> infer; simgen produces
synthetic data and the dense reference computations used in testing.
"""

from .design import ModelDesign, ModelVariant, build_design
from .emcore import EMConfig, FitResult, ParamState, e_step, loglik, run_em, score_vector
from .infer import infer, observed_information, prediction_variance
from .ingest import LongitudinalDataset, ObservationRecord, Schema, build_dataset, parse_records

__version__ = "0.1.0"

__all__ = [
    "EMConfig",
    "FitResult",
    "LongitudinalDataset",
    "ModelDesign",
    "ModelVariant",
    "ObservationRecord",
    "ParamState",
    "Schema",
    "build_dataset",
    "build_design",
    "e_step",
    "infer",
    "loglik",
    "observed_information",
    "parse_records",
    "prediction_variance",
    "run_em",
    "score_vector",
]
