"""Exception hierarchy.

Every error carries the process exit code the CLI maps it to:
1 for usage/config problems, 2 for bad input data, 3 for numeric failures.
"""


class BridgeError(Exception):
    exit_code = 1


class ConfigError(BridgeError):
    exit_code = 1


class DataError(BridgeError):
    exit_code = 2


class NumericError(BridgeError):
    exit_code = 3


class DimensionError(BridgeError, ValueError):
    exit_code = 1


class VariantError(ConfigError):
    pass


class IncompatibilityError(ConfigError):
    pass


class InputError(DataError):
    pass


class DegenerateMaskError(DataError):
    pass


class TokenLookupError(DataError, IndexError):
    pass


class AlignmentFileError(DataError):
    """Parallel files whose line counts or token counts disagree."""


class CheckpointError(DataError):
    pass


class CheckpointFormatError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass
