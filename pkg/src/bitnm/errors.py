"""Exception types shared across the package."""


class BitNMError(Exception):
    """Base class for all package errors."""


class ShapeError(BitNMError):
    """Operand shapes do not conform."""


class PatternError(BitNMError):
    """Invalid N:M pattern or dimension not divisible by the group size."""


class ConfigError(BitNMError):
    """Invalid or inconsistent run configuration."""


class NumericFault(BitNMError):
    """An operation produced non-finite values."""


class PackError(BitNMError):
    """Packed weight payload violates the layout constraints."""


class CheckpointError(BitNMError):
    """Checkpoint or export file is malformed."""


class StateError(BitNMError):
    """Operation called in an invalid state (e.g. backward before forward)."""
