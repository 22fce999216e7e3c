"""Exception hierarchy shared by every module."""


class LangAdaptError(Exception):
    """Base class; ``kind`` is what the CLI prints in its one-line error."""

    kind = "error"


class ConfigurationError(LangAdaptError, ValueError):
    kind = "configuration"


class ContractError(LangAdaptError, ValueError):
    kind = "contract"


class NumericError(LangAdaptError, ArithmeticError):
    kind = "numeric"


class FormatError(LangAdaptError, ValueError):
    kind = "format"


class DataError(LangAdaptError, ValueError):
    kind = "data"
