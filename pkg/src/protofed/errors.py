"""Exception types shared across the package."""


class ProtoFedError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ProtoFedError, ValueError):
    """An argument violates a documented precondition."""


class ParseError(ProtoFedError, ValueError):
    """Malformed IDX file."""


class BadMagicError(ParseError):
    pass


class TruncatedFileError(ParseError):
    pass


class CountMismatchError(ParseError):
    pass


class ProtocolError(ProtoFedError, RuntimeError):
    """A federated round could not proceed."""


class ConfigError(ProtoFedError, ValueError):
    """Invalid experiment configuration. ``key`` names the offending field."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key
