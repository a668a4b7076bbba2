"""Exception taxonomy shared across the package."""


class GeofedError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GeofedError):
    """Operand shapes violate an operation's contract."""


class DegenerateVectorError(GeofedError):
    """A vector that must have positive norm is (numerically) zero."""


class DegenerateDirectionError(GeofedError):
    """A column that must be normalizable has a vanishing norm."""


class NumericOverflowError(GeofedError):
    """A computation produced a non-finite intermediate value."""


class EvaluationError(GeofedError):
    """A checked function could not be evaluated (non-finite output)."""


class ProtocolError(GeofedError):
    """A federation-protocol contract was violated (empty round, basis mismatch, ...)."""


class TrainingError(GeofedError):
    """Local training diverged; carries node and step context in the message."""


class ConfigError(GeofedError):
    """An experiment configuration is invalid or unsatisfiable."""


class ComparisonError(GeofedError):
    """Two experiment runs cannot be compared."""
