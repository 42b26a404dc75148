"""
Spotvol - semiparametric spot volatility filtering for one-dimensional diffusions.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: E402
    BandwidthTooSmallError,
    DriftNotIdentifiedError,
    ExperimentFailedError,
    LikelihoodUndefinedError,
    PathDivergedError,
    SpotVolError,
)
from .models import (  # noqa: E402
    EstimateSeries,
    FilterParams,
    FilterState,
    ModelSpec,
    MomentPair,
    Path,
    SimConfig,
)
from .workflow import ExperimentWorkflow  # noqa: E402

__all__ = [
    "ExperimentWorkflow",
    "ModelSpec",
    "SimConfig",
    "Path",
    "FilterParams",
    "FilterState",
    "MomentPair",
    "EstimateSeries",
    "SpotVolError",
    "PathDivergedError",
    "DriftNotIdentifiedError",
    "LikelihoodUndefinedError",
    "BandwidthTooSmallError",
    "ExperimentFailedError",
]
