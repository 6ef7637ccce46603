"""Exception hierarchy shared by all modules."""


class CpwlError(Exception):
    """Base class for package errors."""


class ParseError(CpwlError):
    pass


class ValidationError(CpwlError):
    pass


class ModelBuildError(CpwlError):
    pass


class InconsistentSolutionError(CpwlError):
    def __init__(self, message: str, worst: float):
        super().__init__(message)
        self.worst = worst


class SolverError(CpwlError):
    pass


class TransformError(CpwlError):
    pass
