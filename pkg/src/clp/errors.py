"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class CLPError(Exception):
    exit_code = 1


class ConfigError(CLPError, ValueError):
    exit_code = 2


class DataError(CLPError):
    exit_code = 3


class ManifestFormatError(DataError):
    def __init__(self, path, line, reason):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {reason}")


class NotEnoughFramesError(DataError):
    def __init__(self, required, available, what="frames"):
        self.required = required
        self.available = available
        super().__init__(f"not enough {what}: need {required}, have {available}")


class ContractError(CLPError, ValueError):
    """A caller violated an operation's precondition."""


class QueueWarmupError(CLPError):
    """The memory queue is too small to split; skip CIR for this step."""

    def __init__(self, filled, required):
        self.filled = filled
        self.required = required
        super().__init__(
            f"memory queue holds {filled} elements, {required} required; "
            "skip the CIR term this step and keep enqueueing")


class NumericalError(CLPError, FloatingPointError):
    exit_code = 4

    def __init__(self, message, batch_ids=None):
        self.batch_ids = list(batch_ids or [])
        if self.batch_ids:
            message = f"{message} (batch: {', '.join(map(str, self.batch_ids))})"
        super().__init__(message)
