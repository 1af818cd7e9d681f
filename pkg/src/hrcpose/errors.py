"""Exception hierarchy. The CLI maps these onto exit codes."""


class HRCError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 2


class InvalidPoseError(HRCError, ValueError):
    pass


class DegenerateNormalsError(HRCError, ValueError):
    pass


class DatasetParseError(HRCError, ValueError):
    def __init__(self, line_no, msg):
        super().__init__(f"line {line_no}: {msg}")
        self.line_no = line_no


class DatasetVersionError(HRCError, ValueError):
    pass


class ShapeError(HRCError, ValueError):
    pass


class TapeStateError(HRCError, RuntimeError):
    pass


class CheckpointError(HRCError, ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class ConfigError(HRCError, ValueError):
    exit_code = 1


class NumericError(HRCError, FloatingPointError):
    exit_code = 3


class InputError(HRCError, ValueError):
    pass
