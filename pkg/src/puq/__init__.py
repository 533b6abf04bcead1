"""Principal uncertainty quantification: PCA uncertainty regions with risk control."""

from .approximation import PrincipalBasis, approximate, approximate_batch, empirical_quantile
from .calibration import (
    CalibrationResult,
    LambdaGrid,
    RiskConfig,
    coverage_loss,
    da_puq_calibrate,
    e_puq_calibrate,
    rda_puq_calibrate,
    reconstruction_loss,
)
from .core import ConfigError, DataError, ImageTensor, PatchSpec, PUQError, ShapeError
from .metrics import RiskReport, evaluate, guarantee_verdict, uncertainty_volume

__version__ = "0.1.0"

__all__ = [
    "PrincipalBasis", "approximate", "approximate_batch", "empirical_quantile",
    "CalibrationResult", "LambdaGrid", "RiskConfig", "coverage_loss", "reconstruction_loss",
    "e_puq_calibrate", "da_puq_calibrate", "rda_puq_calibrate",
    "ConfigError", "DataError", "ImageTensor", "PatchSpec", "PUQError", "ShapeError",
    "RiskReport", "evaluate", "guarantee_verdict", "uncertainty_volume",
]
