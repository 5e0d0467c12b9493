"""Exception types shared across the package."""


class PersonaCvaeError(Exception):
    """Base class for all package errors."""


class ShapeError(PersonaCvaeError, ValueError):
    """Operands have incompatible shapes."""


class InvalidSupportError(PersonaCvaeError, ValueError):
    """A masked distribution was requested over an empty support."""


class ContractError(PersonaCvaeError, ValueError):
    """A caller violated an operation precondition."""


class ParseError(PersonaCvaeError, ValueError):
    """A corpus file is malformed; message names the offending line."""


class ConfigError(PersonaCvaeError, ValueError):
    """Invalid configuration value."""


class CheckpointError(PersonaCvaeError, IOError):
    """Checkpoint file unreadable, truncated, or incompatible."""


class TrainingDiverged(PersonaCvaeError, RuntimeError):
    """Training hit a non-finite loss component."""


class MetricUndefinedError(PersonaCvaeError, ValueError):
    """Metric requested on inputs where it is undefined."""
