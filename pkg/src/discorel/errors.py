"""Exception hierarchy. CLI maps DiscorelError to exit code 2."""


class DiscorelError(Exception):
    """Base class for all runtime errors raised by this package."""


class ParseError(DiscorelError):
    """Malformed input file; carries the offending location when known."""

    def __init__(self, message, path=None, line=None):
        loc = ""
        if path is not None:
            loc = f"{path}:"
        if line is not None:
            loc += f"{line}:"
        super().__init__(f"{loc} {message}" if loc else message)
        self.path = path
        self.line = line


class ConfigError(DiscorelError):
    pass


class DataError(DiscorelError):
    pass


class DivergenceError(DiscorelError):
    """Training loss became non-finite; carries a diagnostic dump path."""

    def __init__(self, message, dump_path=None):
        super().__init__(message)
        self.dump_path = dump_path
