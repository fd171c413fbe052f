"""Exception types shared across the package."""


class DolgError(Exception):
    """Base class; `kind` is the machine-readable tag the CLI emits."""

    kind = "error"


class InvalidInputError(DolgError, ValueError):
    kind = "invalid_input"


class ConfigError(DolgError, ValueError):
    kind = "config"


class ShapeError(DolgError, ValueError):
    kind = "shape"


class DegenerateGlobalError(DolgError, ValueError):
    kind = "degenerate_global"


class FormatError(DolgError, ValueError):
    """Malformed binary file. `offset` is the byte position where parsing failed."""

    kind = "format"

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DataError(DolgError, KeyError):
    kind = "data"

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class TrainingError(DolgError, RuntimeError):
    kind = "training"
