"""Exception types shared across the package."""


class RotaflipError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(RotaflipError, ValueError):
    """Operands have incompatible shapes."""

    def __init__(self, message, *shapes):
        self.shapes = tuple(tuple(s) for s in shapes)
        if shapes:
            message = f"{message}: " + " vs ".join(str(s) for s in self.shapes)
        super().__init__(message)


class ConfigError(RotaflipError, ValueError):
    """An experiment or model configuration is invalid.

    ``violations`` lists every offending field so callers can report them all
    at once instead of fixing one per run.
    """

    def __init__(self, violations):
        if isinstance(violations, str):
            violations = [violations]
        self.violations = list(violations)
        super().__init__("; ".join(self.violations))


class DivergenceError(RotaflipError, RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message, records=None):
        self.records = list(records or [])
        super().__init__(message)


class PNMParseError(RotaflipError, ValueError):
    """A PGM/PPM file could not be decoded."""

    def __init__(self, message, offset):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")
