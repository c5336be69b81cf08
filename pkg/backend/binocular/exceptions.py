from typing import Any, Optional


class BinocularError(Exception):
    """Base class for every error raised by the binocular package."""


class ConfigurationError(BinocularError):
    pass


class DatasetError(BinocularError):
    """Bad dataset layout, manifest, empty class or overlapping splits."""


class EpisodeSamplingError(BinocularError):
    """A split cannot provide the requested N-way K-shot episode."""


class DegradationError(BinocularError):
    pass


class ShapeMismatchError(BinocularError):
    pass


class LossComputationError(BinocularError):
    """Label out of range or a degenerate episode (N < 2)."""


class CheckpointError(BinocularError):
    """Unreadable checkpoint, unsupported version or config-hash mismatch."""


class DivergenceError(BinocularError):
    """The total loss became NaN; carries the last loss report."""

    def __init__(self, message: str, report: Optional[Any] = None) -> None:
        super().__init__(message)
        self.report = report
