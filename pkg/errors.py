"""
Иерархия ошибок лаборатории.

Каждая ошибка знает свой код выхода для CLI:
0 - успех, 1 - ошибка использования, 2 - ошибка данных/формата, 3 - численный сбой.
"""
from typing import List, Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class LabError(Exception):
    exit_code = EXIT_DATA


class ConfigError(LabError):
    exit_code = EXIT_USAGE


class RangeError(LabError):
    exit_code = EXIT_USAGE


class DimensionError(LabError):
    """Несовпадение размерностей; axis - имя оси, на которой сломалось"""

    def __init__(self, message: str, axis: Optional[str] = None):
        super().__init__(message)
        self.axis = axis


class DegenerateBatchError(LabError):
    pass


class ContractError(LabError):
    pass


class LabelError(LabError):
    pass


class ClassificationError(LabError):
    pass


class EmptyInputError(LabError):
    pass


class SplitError(LabError):
    pass


class FormatError(LabError):
    """Битый файл .ftckpt/.ftdata; offset - байтовое смещение проблемы"""

    def __init__(self, message: str, offset: Optional[int] = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ComparisonError(LabError):
    def __init__(self, message: str, names: Optional[List[str]] = None):
        super().__init__(message)
        self.names = list(names or [])


class NumericError(LabError):
    exit_code = EXIT_NUMERIC

    def __init__(self, message: str, param_name: Optional[str] = None):
        super().__init__(message)
        self.param_name = param_name


class OutputError(LabError):
    """Не удалось записать результат; path - куда писали"""

    def __init__(self, message: str, path: Optional[str] = None):
        super().__init__(message)
        self.path = path
