class ToothKitError(Exception):
    """Base error; exit_code is what the CLI returns for it."""

    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)
        self.message = message


class UsageError(ToothKitError):
    exit_code = 1


class InvalidInputError(ToothKitError, ValueError):
    """Malformed or out-of-range input."""

    exit_code = 2


class NumericalError(ToothKitError, ArithmeticError):
    """Non-finite loss, failed gradient check and similar."""

    exit_code = 3
