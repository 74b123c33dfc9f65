"""Exception hierarchy shared by all segprop modules."""


class SegPropError(Exception):
    pass


class DimensionMismatch(SegPropError, ValueError):
    pass


class BadMagic(SegPropError, ValueError):
    pass


class TruncatedFile(SegPropError, ValueError):
    pass


class NonFiniteValue(SegPropError, ValueError):
    pass


class EmptyInput(SegPropError, ValueError):
    pass


class BadOrdering(SegPropError, ValueError):
    pass


class TooFewKeyframes(SegPropError, ValueError):
    pass


class MissingFlow(SegPropError, LookupError):
    pass


class NotInitialized(SegPropError, RuntimeError):
    pass


class TooFewPoints(SegPropError, ValueError):
    pass


class InstanceTooLarge(SegPropError, ValueError):
    pass


class SequenceTooShort(SegPropError, ValueError):
    pass


class InvalidScript(SegPropError, ValueError):
    pass


class ConfigError(SegPropError, ValueError):
    pass


class FormatError(SegPropError, ValueError):
    """Malformed PGM/PPM/palette file."""
