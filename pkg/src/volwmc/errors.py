"""Exception types shared across the package."""


class VolwmcError(Exception):
    """Base class for package-specific failures."""


class ConfigError(VolwmcError):
    """Invalid or incomplete configuration document."""


class DataFormatError(VolwmcError):
    """Malformed market data file (reported with line or date context)."""


class GridError(VolwmcError):
    """Surface grid is invalid or does not match an expected grid."""


class CurveError(VolwmcError):
    """Discount curve misuse, e.g. a request beyond the last pillar."""


class NoSolutionError(VolwmcError):
    """Root finding has no admissible solution (e.g. price at or below intrinsic)."""


class ConvergenceError(VolwmcError):
    """An iterative scheme exhausted its budget without meeting tolerance."""


class CheckpointError(VolwmcError):
    """Checkpoint file is corrupt or structurally invalid."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an incompatible format version."""


class UnknownLossHeadError(VolwmcError):
    """Requested loss head was never registered."""


class TrainingDivergedError(VolwmcError):
    """Training loss became non-finite; carries the partial report."""

    def __init__(self, message, report=None):
        super().__init__(message)
        self.report = report


class PathBindingError(VolwmcError):
    """Weights or a weight decoder were applied to a foreign path set."""


class MissingArtifactError(VolwmcError):
    """A report was requested before the pipeline stage that feeds it ran."""
