"""Exception hierarchy shared by every lab module."""


class LabError(Exception):
    """Base class for all errors raised by diffusionlab."""


class ParameterError(LabError, ValueError):
    pass


class ShapeError(LabError, ValueError):
    pass


class OrderingError(LabError, ValueError):
    pass


class ConfigurationError(LabError, ValueError):
    pass


class AccountingError(LabError, ValueError):
    pass


class VocabularyError(LabError, ValueError):
    pass


class CapacityError(LabError, ValueError):
    pass


class DataError(LabError, ValueError):
    pass


class DegenerateError(LabError, ValueError):
    pass


class FormatError(LabError):
    """Raised when a binary file does not parse; carries the failing byte offset."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class DependencyError(LabError):
    """A required upstream artifact (dataset, checkpoint) is missing."""
