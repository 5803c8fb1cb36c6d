"""Exception types shared across the package."""


class AlsoError(Exception):
    """Base class for every error raised by this package."""


class PoolError(AlsoError):
    """A strategy pool file or record is unusable."""


class DuplicateId(PoolError):
    pass


class EmbeddingError(AlsoError):
    """Embedding provider failure (transport, malformed response, bad dims)."""

    def __init__(self, message, arm_index=None):
        if arm_index is not None:
            message = f"arm {arm_index}: {message}"
        super().__init__(message)
        self.arm_index = arm_index


class DimensionMismatch(AlsoError):
    pass


class NumericError(AlsoError):
    """Non-finite values showed up where finite ones are required."""


class EmptyBuffer(AlsoError):
    pass


class InvalidReward(AlsoError):
    pass


class InvalidEpsilon(AlsoError):
    pass


class InvalidDistribution(AlsoError):
    pass


class InvalidConfig(AlsoError):
    pass


class DimensionOutOfRange(AlsoError):
    def __init__(self, dimension, value, low, high):
        super().__init__(f"{dimension}={value!r} outside [{low}, {high}]")
        self.dimension = dimension
        self.value = value


class EpisodeExhausted(AlsoError):
    pass


class ArmOutOfRange(AlsoError):
    pass


class ProtocolError(AlsoError):
    """A remote peer sent something that does not follow the wire format."""


class CheckpointError(AlsoError):
    pass


class UnknownMethod(AlsoError):
    pass
