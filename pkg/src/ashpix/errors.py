"""Exception types mapped onto the CLI exit-code contract.

Exit codes: 0 success, 1 usage/config error, 2 data error,
3 runtime/training error.
"""


class AshpixError(Exception):
    """Base class for toolkit errors. `exit_code` drives the CLI."""

    exit_code = 3


class ConfigError(AshpixError):
    """Bad flags, unknown config keys, or invalid option values."""

    exit_code = 1


class DataError(AshpixError):
    """Unusable input: undecodable images, shape mismatches, bad manifests."""

    exit_code = 2


class ArchError(DataError):
    """Model specification violates the declared schedules or shapes."""


class CheckpointError(DataError):
    """Checkpoint missing, unloadable, or inconsistent with its metadata."""


class TrainingError(AshpixError):
    """Training-time failure: divergence, lock conflicts, aborted runs."""

    exit_code = 3
