"""Exception types shared across the toolkit."""


class GseditError(Exception):
    pass


class FormatError(GseditError, ValueError):
    """A file does not follow the expected binary/textual layout."""


class DataError(GseditError, ValueError):
    """A file parses but contains invalid values (NaN, inf, ...)."""


class ValidationError(GseditError, ValueError):
    """An object or config violates its invariants."""


class ContractError(GseditError, ValueError):
    """A caller violated an operation's precondition."""


class NumericError(GseditError, RuntimeError):
    """A computation produced non-finite intermediates."""


class ProviderError(GseditError, RuntimeError):
    """A score provider failed or returned malformed output."""
