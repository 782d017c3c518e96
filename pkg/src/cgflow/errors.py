"""Exception hierarchy shared by all cgflow modules."""


class CgflowError(Exception):
    """Base class for all cgflow errors."""


class ParameterError(CgflowError):
    """Invalid argument values (bad exponents, malformed ensemble spec, ...)."""


class ConfigError(CgflowError):
    """Malformed or schema-violating run configuration."""


class CapacityError(CgflowError):
    """A requested computation exceeds the configured size or budget caps."""


class ConvergenceError(CgflowError):
    """The iterative linear solver failed to reach its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class PreconditionError(CgflowError):
    """An input violates a documented precondition (e.g. non-harmonic test function)."""


class ConsistencyError(CgflowError):
    """An exact identity was violated beyond tolerance; signals a solver problem."""


class ReliabilityError(CgflowError):
    """Too many Monte Carlo samples were aborted to trust the estimate."""


class PigeonholeDiagnosticError(CgflowError):
    """Neither pigeonhole branch holds on the supplied point estimates.

    Impossible for exact expectations; indicates statistical noise in the
    input record.  Carries the telescoping contrast product for inspection.
    """

    def __init__(self, message, product=None):
        super().__init__(message)
        self.product = product
