"""Exception hierarchy.

Each class carries the CLI exit code used when it escapes a command.
"""


class ModeRouteError(Exception):
    exit_code = 1


class InputError(ModeRouteError, ValueError):
    """Bad argument or precondition violation."""

    exit_code = 5


class ConfigError(ModeRouteError):
    exit_code = 2


class ParseError(ModeRouteError):
    """Malformed file content. ``line`` is 1-based when known."""

    exit_code = 3

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}:"
        if line is not None:
            where += f"line {line}: "
        elif where:
            where += " "
        super().__init__(where + message)


class TransportError(ModeRouteError):
    """Network failure that survived every retry."""

    exit_code = 4


class RequestError(ModeRouteError):
    """Provider rejected the request (HTTP 4xx); never retried."""

    exit_code = 4

    def __init__(self, message: str, status_code: int | None = None):
        self.status_code = status_code
        super().__init__(message)


class ScriptedMissError(ModeRouteError, KeyError):
    exit_code = 4

    def __str__(self) -> str:
        return Exception.__str__(self)


class ReplayMissError(ModeRouteError, KeyError):
    exit_code = 4

    def __str__(self) -> str:
        return Exception.__str__(self)


class RoutingError(ModeRouteError):
    exit_code = 5


class LoadError(ModeRouteError):
    """Model file is corrupt, truncated or from another format version."""

    exit_code = 3


class VersionMismatchError(ModeRouteError):
    exit_code = 5
