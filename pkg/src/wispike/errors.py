"""Exception hierarchy shared by every wispike module."""


class WiSpikeError(Exception):
    """Base class for all library errors."""


class InvalidSample(WiSpikeError, ValueError):
    pass


class InvalidSpec(WiSpikeError, ValueError):
    pass


class InvalidThreshold(WiSpikeError, ValueError):
    pass


class ShapeError(WiSpikeError, ValueError):
    pass


class InvalidConfig(WiSpikeError, ValueError):
    pass


class ConfigError(WiSpikeError, ValueError):
    pass


class StateError(WiSpikeError, RuntimeError):
    pass


class InvalidEmbedding(WiSpikeError, ValueError):
    pass


class InvalidSpikes(WiSpikeError, ValueError):
    pass


class InvalidRate(WiSpikeError, ValueError):
    pass


class DataError(WiSpikeError, ValueError):
    pass


class NumericsError(WiSpikeError, ArithmeticError):
    pass


class FormatError(WiSpikeError, ValueError):
    """Malformed binary file; ``offset`` is the byte position of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
