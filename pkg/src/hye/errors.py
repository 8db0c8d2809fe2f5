"""Exception hierarchy shared across the package.

Each CLI failure class maps to a distinct process exit code (see cli.EXIT_CODES).
"""


class HyeError(Exception):
    """Base class for all package errors."""


class ConfigurationError(HyeError):
    """Invalid configuration value or inconsistent config sections."""


class DimensionError(HyeError):
    """Tensor shapes incompatible for the requested operation."""


class DataError(HyeError):
    """Invalid, missing or malformed input data."""


class TrainingError(HyeError):
    """Training diverged or produced a non-finite loss."""


class UsageError(HyeError):
    """Operation called in an unsupported way (API misuse)."""


class CheckpointError(DataError):
    """Base class for checkpoint load failures."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint file written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """Checkpoint file ends before the declared payload is complete."""


class CheckpointChecksumError(CheckpointError):
    """Checkpoint payload does not match its CRC32."""


class TileError(DataError):
    """Base class for tile file read failures."""


class TileMagicError(TileError):
    """Tile file does not start with the expected magic bytes."""


class TileVersionError(TileError):
    """Tile file written by an unsupported format version."""


class TileTruncatedError(TileError):
    """Tile file ends before the declared payload is complete."""


class TileChecksumError(TileError):
    """Tile payload does not match its CRC32."""
