"""Exception hierarchy shared across the package."""


class MixRecError(Exception):
    """Base class for all package errors."""


class ShapeError(MixRecError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(MixRecError, ValueError):
    """A precondition of an operation was violated."""


class ParameterError(MixRecError, ValueError):
    """An argument is outside its allowed range."""


class ConfigError(MixRecError, ValueError):
    """Invalid or inconsistent configuration."""


class DataError(MixRecError):
    """Input data could not be read or is unusable."""


class SchemaError(DataError):
    """Feature columns disagree with the declared schema."""


class EmptyDatasetError(DataError):
    """Filtering removed every interaction."""


class ProtocolError(DataError):
    """The evaluation protocol cannot be satisfied (e.g. too few negatives)."""


class CheckpointError(DataError):
    """A checkpoint or container file is malformed or inconsistent."""


class NumericalError(MixRecError, ArithmeticError):
    """A loss or gradient became non-finite."""
