"""Numerical failures raised by the estimation pipeline.

Invalid arguments raise ``ValueError``; everything below signals that the numbers
themselves broke down and maps to exit status 2 on the command line.
"""

from typing import Optional


class SpotVolError(Exception):
    """Base class for numerical failures."""


class PathDivergedError(SpotVolError):
    """Raised when an Euler path produces a non-finite value."""

    def __init__(self, step: int, path_index: Optional[int] = None):
        self.step = step
        self.path_index = path_index
        where = f" (path {path_index})" if path_index is not None else ""
        super().__init__(f"path diverged at step {step}{where}")


class DriftNotIdentifiedError(SpotVolError):
    """Raised when the drift regression has no valid solution."""

    def __init__(self, reason: str):
        self.reason = reason
        super().__init__(f"drift not identified: {reason}")


class LikelihoodUndefinedError(SpotVolError):
    """Raised when every update of a likelihood pass was skipped."""

    def __init__(self, reason: str = "every filter update was skipped"):
        super().__init__(f"likelihood undefined: {reason}")


class BandwidthTooSmallError(SpotVolError):
    """Raised when the local linear design is empty or singular at ``x0``."""

    def __init__(self, x0: float, effective: int):
        self.x0 = x0
        self.effective = effective
        super().__init__(
            f"bandwidth too small at x0={x0:.6g} ({effective} weighted observations)"
        )


class ExperimentFailedError(SpotVolError):
    """Raised when too many Monte Carlo paths had to be dropped."""

    def __init__(self, model: str, dropped: int, n_paths: int, first_error: str):
        self.model = model
        self.dropped = dropped
        self.n_paths = n_paths
        super().__init__(
            f"experiment for model '{model}' dropped {dropped} of {n_paths} paths "
            f"(first failure: {first_error})"
        )
