"""Exception hierarchy. Configuration problems subclass ``ConfigError`` so the
CLI can map them to exit code 2; everything else is a runtime failure."""


class EstError(Exception):
    pass


class ConfigError(EstError, ValueError):
    """Invalid parameters, flags or model configuration."""


class DimensionError(ConfigError):
    pass


class ThresholdError(ConfigError):
    pass


class InputError(ConfigError):
    pass


class SequencingError(EstError):
    """A time step was requested outside ``1..T``."""


class ConsistencyError(EstError):
    pass


class DivergenceError(EstError):
    pass


class ParseError(EstError):
    pass


class AccountingError(EstError):
    pass
