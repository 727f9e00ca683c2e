"""Exception types shared across the toolkit.

Everything derives from IgboltzError so callers can catch the whole
family with one clause. The CLI maps these onto exit codes.
"""


class IgboltzError(Exception):
    """Base class for all toolkit errors."""


class NonPositiveEntry(IgboltzError):
    """A probability table contains a zero or negative cell."""


class BadLength(IgboltzError):
    """A probability table whose length is not a power of two."""


class BadOrder(IgboltzError):
    """Order threshold l outside 1..n."""


class NonPositiveReconstruction(IgboltzError):
    """Expectation parameters that do not correspond to any strictly
    positive distribution (inclusion-exclusion produced a cell <= 0)."""


class NonRealizable(IgboltzError):
    """Mixed coordinates that fail basic realizability checks."""


class NoConvergence(IgboltzError):
    """An iterative solver stopped before reaching its tolerance.

    Carries the final residual so callers can report it.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class ThetaOverflow(IgboltzError):
    """Natural parameters so large that a normalized cell underflows
    to exact zero even after log-sum-exp stabilization."""


class DimensionMismatch(IgboltzError):
    """Two objects that must share a variable count do not."""


class CapExceeded(IgboltzError):
    """Requested exact enumeration beyond the hard n <= 20 cap."""


class SingularSubblock(IgboltzError):
    """A Fisher sub-block was numerically singular.

    Carries an estimate of the condition number.
    """

    def __init__(self, message, cond=None):
        super().__init__(message)
        self.cond = cond


class Diverged(IgboltzError):
    """A training run whose objective kept getting worse.

    Carries the partial result (parameters and the trace up to the
    failing epoch) so callers can still write artifacts.
    """

    def __init__(self, message, result=None):
        super().__init__(message)
        self.result = result
