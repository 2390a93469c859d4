"""Exception types shared across the toolkit."""


class SpeechMLCError(Exception):
    """Base class for all toolkit errors."""


class FormatError(SpeechMLCError, ValueError):
    """A file does not match the expected binary or text layout."""


class UnsupportedFormatError(FormatError):
    """A well-formed file uses an encoding the toolkit does not read."""


class EmptyInputError(SpeechMLCError, ValueError):
    pass


class ValidationError(SpeechMLCError, ValueError):
    pass


class ConfigurationError(SpeechMLCError, ValueError):
    pass


class NumericError(SpeechMLCError, ArithmeticError):
    pass


class ContractError(SpeechMLCError, RuntimeError):
    pass


class DataError(SpeechMLCError, RuntimeError):
    pass


class PlanningError(SpeechMLCError, RuntimeError):
    pass


class UndefinedRatioError(SpeechMLCError, ZeroDivisionError):
    pass
