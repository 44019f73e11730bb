"""Exception hierarchy shared by all flowtune modules."""


class FlowtuneError(Exception):
    pass


class ConfigurationError(FlowtuneError, ValueError):
    pass


class DomainError(FlowtuneError, ValueError):
    pass


class InsufficientDataError(DomainError):
    pass


class ConditioningError(FlowtuneError, ArithmeticError):
    pass


class BudgetExhausted(FlowtuneError):
    pass


class RetrievalUnavailable(FlowtuneError):
    pass


class SchemaError(FlowtuneError, ValueError):
    pass


class LimitError(FlowtuneError, ValueError):
    pass


class BackendError(FlowtuneError):
    def __init__(self, message, attempts=0, status=None):
        super().__init__(message)
        self.attempts = attempts
        self.status = status


class StructuredParseError(FlowtuneError):
    def __init__(self, message, attempts=0, last_error=None):
        super().__init__(message)
        self.attempts = attempts
        self.last_error = last_error


class TaintError(FlowtuneError):
    """Raised when reasoning-trace text would leak into a prompt."""


class ArchiveError(FlowtuneError, OSError):
    def __init__(self, message, moved=(), failed=()):
        super().__init__(message)
        self.moved = list(moved)
        self.failed = list(failed)


class ReplayDivergenceError(FlowtuneError):
    def __init__(self, message, iteration=None):
        super().__init__(message)
        self.iteration = iteration


class RunAborted(FlowtuneError):
    def __init__(self, message, trajectory=None):
        super().__init__(message)
        self.trajectory = list(trajectory or [])
