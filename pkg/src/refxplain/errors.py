"""Exception hierarchy shared by all refxplain modules."""


class RefxplainError(Exception):
    """Base class for every error raised by this package."""


class InputShapeError(RefxplainError, ValueError):
    pass


class ConfigError(RefxplainError, ValueError):
    pass


class DivergenceError(RefxplainError, ArithmeticError):
    def __init__(self, epoch: int):
        super().__init__(f"training diverged (non-finite loss) at epoch {epoch}")
        self.epoch = epoch


class UndefinedMetricError(RefxplainError, ArithmeticError):
    pass


class DataError(RefxplainError, ValueError):
    pass


class StructureError(RefxplainError, ValueError):
    """The network does not have the layer structure an operation needs."""


class PreconditionError(RefxplainError, ValueError):
    pass


class NoSolutionError(RefxplainError, ValueError):
    def __init__(self, message: str, attainable: tuple[float, float]):
        super().__init__(message)
        self.attainable = attainable


class EnumerationLimitError(RefxplainError, ValueError):
    pass
