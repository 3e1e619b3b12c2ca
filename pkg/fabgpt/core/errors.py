"""Error hierarchy. Each error carries the process exit code the CLI uses."""
from typing import Optional


class FabError(Exception):
    exit_code = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail


class ConfigurationError(FabError):
    pass


class InputError(FabError, ValueError):
    pass


class ShapeError(InputError):
    pass


class DataError(FabError):
    pass


class DatasetIOError(FabError, OSError):
    pass


class FormatError(FabError):
    pass


class MetricUndefinedError(FabError, ValueError):
    pass


class NumericError(FabError, ArithmeticError):
    exit_code = 2

    def __init__(self, term: str, step: Optional[int] = None):
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in loss term '{term}'{where}")
        self.term = term
        self.step = step
