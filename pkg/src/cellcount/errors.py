"""Exception hierarchy.

Every error carries a stable class name; the CLI prints it as the
machine-readable first token of its one-line failure message.
"""


class CellCountError(Exception):
    """Base class for all package errors."""


class ConfigError(CellCountError):
    pass


class ShapeError(CellCountError, ValueError):
    pass


class AnnotationError(CellCountError, ValueError):
    pass


class IngestionError(CellCountError):
    pass


class ParseError(IngestionError):
    def __init__(self, path, line, message):
        self.path = str(path)
        self.line = line
        super().__init__(f"{path}:{line}: {message}")


class LabelError(CellCountError, ValueError):
    pass


class InputError(CellCountError, ValueError):
    pass


class DependencyError(CellCountError):
    pass


class TrainingError(CellCountError):
    pass


class ProtocolError(CellCountError):
    pass
