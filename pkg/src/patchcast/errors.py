"""Exception hierarchy shared across the package."""


class PatchcastError(Exception):
    """Base class for all package errors."""


class ConfigError(PatchcastError, ValueError):
    """Invalid configuration. ``field`` names the offending path when known."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class ShapeError(PatchcastError, ValueError):
    pass


class ParseError(PatchcastError, ValueError):
    def __init__(self, message, path=None, line=None):
        where = ""
        if path is not None:
            where = f"{path}" + (f":{line}" if line is not None else "") + ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class TrainingError(PatchcastError, RuntimeError):
    pass


class EvaluationError(PatchcastError, RuntimeError):
    pass


class DiagnosticsError(PatchcastError, RuntimeError):
    pass


class RenderError(PatchcastError, RuntimeError):
    pass
