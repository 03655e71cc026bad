"""Exception types raised across the package."""


class ModeError(RuntimeError):
    """An operation was called on a Q head in the wrong output mode."""


class DatasetFormatError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class DegenerateEncoderError(RuntimeError):
    """Every encoder dimension collapsed; no vote can be cast."""


class NonFiniteLossError(RuntimeError):
    def __init__(self, message, snapshot_path=None):
        super().__init__(message)
        self.snapshot_path = snapshot_path
