"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, TrainingAbort -> 4.
"""


class ConfigError(ValueError):
    """A configuration value is missing, malformed or inconsistent."""


class DataError(ValueError):
    """A dataset directory, manifest or sample file is unusable."""


class CheckpointError(RuntimeError):
    """A checkpoint cannot be loaded into the current model/config."""


class UndefinedMetricError(ValueError):
    """The requested metric is undefined for the given inputs."""


class TrainingAbort(RuntimeError):
    """Training hit a non-finite loss; carries the diagnostic dump path."""

    def __init__(self, message: str, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
