"""
Errors
CLI 종료 코드를 가진 예외 계층
"""


class MrmpError(Exception):
    """Base error. `exit_code` is what the CLI exits with."""

    exit_code = 1


class ShapeError(MrmpError, ValueError):
    pass


class NonFiniteError(MrmpError, FloatingPointError):
    pass


class UnknownOpError(MrmpError, KeyError):
    pass


class TapeError(MrmpError, RuntimeError):
    pass


class ConfigError(MrmpError, ValueError):
    exit_code = 2


class DatasetFormatError(MrmpError, ValueError):
    """Malformed dataset file; carries the 1-based line number when known"""

    exit_code = 2

    def __init__(self, message: str, path=None, line_no: int | None = None):
        self.path = path
        self.line_no = line_no
        where = ""
        if path is not None:
            where = f"{path}:{line_no}: " if line_no is not None else f"{path}: "
        super().__init__(f"{where}{message}")


class DegenerateDatasetError(MrmpError, ValueError):
    exit_code = 3


class NonFiniteLossError(NonFiniteError):
    exit_code = 4


class CheckpointError(MrmpError, ValueError):
    exit_code = 5


class LabelMismatchError(MrmpError, ValueError):
    exit_code = 5
