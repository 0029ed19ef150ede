"""Exception hierarchy shared across the package."""


class CCMAError(Exception):
    """Base class for all package errors."""


class ConfigError(CCMAError):
    """Invalid scenario, experiment or backend configuration."""


class InputError(CCMAError, ValueError):
    """A caller passed an argument outside the operation's contract."""


class CoordinationError(CCMAError):
    """Regional coordination failed and fallback was not permitted."""


class BackendUnavailable(CCMAError):
    """Remote model could not be reached after exhausting retries."""


class BackendRequestError(CCMAError):
    """Remote model rejected the request (non-retryable 4xx)."""


class DecisionParseError(CCMAError):
    """Model output contained no parseable decision object."""


class DecisionValidationError(CCMAError):
    """Model output parsed but referenced unknown ids or actions."""


class LogParseError(CCMAError):
    """A trajectory log line could not be parsed."""

    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no
