"""Exception types. Each maps onto one CLI exit code."""


class DagmanError(Exception):
    exit_code = 1


class ValidationError(DagmanError, ValueError):
    """Invalid configuration or arguments; the message leads with the field path."""

    exit_code = 3

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field if field is not None else message.split(":", 1)[0]


class ConfigMismatchError(ValidationError):
    pass


class VolumeFormatError(DagmanError, OSError):
    exit_code = 4


class CheckpointError(DagmanError, OSError):
    exit_code = 4


class NumericalError(DagmanError, ArithmeticError):
    """Non-finite loss during training; ``components`` carries the loss dump."""

    exit_code = 5

    def __init__(self, message: str, components: dict | None = None):
        super().__init__(message)
        self.components = components or {}
