"""Exception hierarchy shared by all pipeline modules."""


class CTMixError(Exception):
    """Base class for all pipeline errors."""


class NotFound(CTMixError):
    """A referenced path or resource does not exist."""


class MalformedScan(CTMixError):
    """Scan directory is unreadable or slice shapes disagree."""


class InvalidArgument(CTMixError, ValueError):
    """An operation received an argument outside its contract."""


class InvalidConfig(CTMixError, ValueError):
    """A configuration is internally inconsistent or infeasible."""


class StratificationError(CTMixError):
    """A manifest cannot be split with per-class stratification."""


class ProtocolError(CTMixError):
    """Workers violated the gather-and-dispatch contract."""


class CheckpointError(CTMixError):
    """Checkpoint file is missing tensors or has mismatched shapes."""


class TrainingDiverged(CTMixError):
    """Loss became non-finite; carries a diagnostics snapshot."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class UndefinedMetric(CTMixError):
    """Metric is undefined for the given inputs (e.g. one-class ROC)."""


class Refused(CTMixError):
    """Operation refused to overwrite existing output without --force."""
