"""Exception hierarchy shared across the package.

Each error carries a ``category`` used by the CLI to pick an exit code:
"runtime" -> 1, "input" -> 2, "config" -> 3.
"""


class MvtsError(Exception):
    category = "runtime"


class DimensionError(MvtsError):
    """Tensor shapes incompatible with the requested operation."""

    category = "runtime"


class ParameterError(MvtsError):
    """An argument value is outside the operation's domain."""

    category = "config"


class ConfigError(MvtsError):
    """Bad run configuration (unknown key, missing mandatory value, ...)."""

    category = "config"


class FormatError(MvtsError):
    """Malformed binary container or checkpoint file."""

    category = "input"

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IngestError(MvtsError):
    """Invalid dataset directory contents."""

    category = "input"


class MetricError(MvtsError):
    """Metric undefined for the given inputs (e.g. single-class scores)."""

    category = "runtime"


class TrainingError(MvtsError):
    """Training contract violation or non-finite loss."""

    category = "runtime"
