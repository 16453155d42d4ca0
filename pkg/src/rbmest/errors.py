"""Exception hierarchy shared across the package."""


class RBMError(Exception):
    """Base class for all package errors."""


class SingularMatrix(RBMError):
    def __init__(self, message="matrix is numerically singular", rcond=None):
        if rcond is not None:
            message = f"{message} (reciprocal condition estimate {rcond:.3e})"
        super().__init__(message)
        self.rcond = rcond


class DimensionMismatch(RBMError, ValueError):
    pass


class NonFiniteEvaluation(RBMError):
    pass


class NonFiniteMatrix(RBMError):
    pass


class DomainError(RBMError, ValueError):
    """An elementary function was evaluated outside its domain.

    ``index`` is the position of the first offending entry when the
    argument carried a batch of contributions.
    """

    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class EmptyParameter(RBMError, ValueError):
    pass


class EvaluationFailed(RBMError):
    def __init__(self, message, index=None):
        super().__init__(message)
        self.index = index


class FlavorMismatch(RBMError, TypeError):
    pass


class DegenerateData(RBMError, ValueError):
    pass


class InadmissibleSpec(RBMError, ValueError):
    pass


class LinkDomainError(DomainError):
    pass


class EmptyData(RBMError, ValueError):
    pass


class MaxIterExceeded(RBMError):
    """Raised only on request; solvers normally return a non-converged result."""
