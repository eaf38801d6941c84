"""Exception hierarchy.

``exit_code`` drives the CLI: 1 for validation problems, 2 for compute
failures, 3 for IO failures.
"""


class InvstabError(Exception):
    exit_code = 2


class ParameterError(InvstabError, ValueError):
    """Invalid argument, range, or dimension."""

    exit_code = 1


class FormatError(ParameterError):
    """A file on disk is malformed (bad header, truncated payload, unknown version)."""

    exit_code = 3


class ContractError(InvstabError):
    """A user-supplied callable broke its interface contract."""


class NumericalError(InvstabError, ArithmeticError):
    """Non-finite values appeared during a computation."""


class SVDConvergenceError(NumericalError):
    def __init__(self, message, metadata=None):
        super().__init__(message)
        self.metadata = dict(metadata or {})


class DegenerateOperatorError(InvstabError):
    pass


class DegenerateRegularizationError(InvstabError):
    def __init__(self, message, shared_null_dim=None):
        super().__init__(message)
        self.shared_null_dim = shared_null_dim


class FilterDomainError(InvstabError):
    pass


class BackendError(InvstabError):
    """Gradient backend cannot differentiate the requested solver."""


class NotApplicableError(InvstabError):
    """Quantity undefined for this solver (e.g. no subgradient certificate)."""


class SearchError(InvstabError):
    def __init__(self, message, failures=()):
        super().__init__(message)
        self.failures = list(failures)


class StageError(InvstabError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 3 if isinstance(cause, OSError) else 2)
