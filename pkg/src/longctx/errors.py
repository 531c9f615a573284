"""Exception types shared across the package."""


class LongCtxError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(LongCtxError, ValueError):
    pass


class DegenerateRowError(LongCtxError, ValueError):
    """A softmax row has no finite entry (every position masked)."""


class EmptyInputError(LongCtxError, ValueError):
    pass


class UnsupportedRateError(LongCtxError, ValueError):
    pass


class ChunkFirstError(LongCtxError, ValueError):
    """Audio longer than one encoder window must be chunked before feature extraction."""


class ConfigError(LongCtxError, ValueError):
    pass


class TopologyError(LongCtxError, ValueError):
    pass


class DeadlockError(LongCtxError, RuntimeError):
    """Raised when ranks block on transfers that can never be matched.

    Attributes
    ----------
    blocked : dict
        Maps each blocked rank to a description of its pending operation.
    """

    def __init__(self, message, blocked=None):
        super().__init__(message)
        self.blocked = dict(blocked or {})


class FabricError(LongCtxError, RuntimeError):
    pass


class TooLongError(LongCtxError, ValueError):
    """A sample cannot be truncated to fit the context without splitting an audio span."""


class EmptyEpochError(LongCtxError, ValueError):
    pass
