"""Exception hierarchy shared by the estimators."""


class CfgmmError(Exception):
    """Base class for package errors."""


class DomainError(CfgmmError, ValueError):
    """Argument outside the domain of a special function or density."""


class DegenerateInputError(CfgmmError, ValueError):
    """Data cannot support the requested estimate (too few points, zero variance)."""


class DegenerateComponentError(CfgmmError):
    """A mixture component collapsed during an M-step."""


class SolveError(CfgmmError):
    """A one-dimensional root solve failed to bracket or converge."""


class DivergenceError(CfgmmError):
    """EM parameters left the admissible region; the run must restart."""
