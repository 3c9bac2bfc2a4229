"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid configuration or usage; the CLI maps it to exit code 2."""


class GenerationError(RuntimeError):
    """The synthetic generator could not satisfy its constraints."""


class NumericError(RuntimeError):
    """Training produced a non-finite loss; the CLI maps it to exit code 3."""
