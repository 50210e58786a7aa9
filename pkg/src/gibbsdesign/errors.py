"""Exception hierarchy used across the package.

All numerical-failure exceptions derive from :class:`GibbsDesignError` so that
Monte Carlo loops can apply a single per-sample failure policy.
"""


class GibbsDesignError(Exception):
    """Base class for all package errors."""


class DesignValidationError(GibbsDesignError):
    """A design violates its invariants (out of bounds or non-finite entry)."""

    def __init__(self, message, row=None, col=None):
        super().__init__(message)
        self.row = row
        self.col = col


class SpecMismatchError(GibbsDesignError):
    """A regression term refers to a variable the design does not have."""


class NoReplicationError(GibbsDesignError):
    """Pure-error machinery was requested for a design with d = n - q = 0."""


class DegenerateDataError(GibbsDesignError):
    """A denominator collapsed below tolerance (e.g. zero pure-error SS)."""


class OverflowGuardError(GibbsDesignError):
    """A linear predictor exceeded the exp() overflow guard (|eta| > 700)."""


class RankError(GibbsDesignError):
    """A required matrix (F'F, E_Q, ...) is numerically singular."""


class DofError(GibbsDesignError):
    """Degrees of freedom are non-positive (n <= p for the t posterior)."""


class DegenerateLossError(GibbsDesignError):
    """The loss carries no information (e.g. all observations censored)."""


class ModeError(GibbsDesignError):
    """Posterior mode search failed to converge.

    Carries the best iterate found and its gradient max-norm.
    """

    def __init__(self, message, best=None, grad_norm=None):
        super().__init__(message)
        self.best = best
        self.grad_norm = grad_norm


class CurvatureError(GibbsDesignError):
    """Hessian at the mode is indefinite beyond the repair threshold."""


class GpFitError(GibbsDesignError):
    """Leave-one-out GP fitting did not converge; carries best parameters."""

    def __init__(self, message, best_params=None):
        super().__init__(message)
        self.best_params = best_params


class TargetSolveError(GibbsDesignError):
    """Target-parameter solve (e.g. Fisher scoring) diverged."""


class StuckError(GibbsDesignError):
    """Every candidate of every coordinate scored -inf; carries the trace."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class EstimateRejectedError(GibbsDesignError):
    """Too many Monte Carlo samples failed; carries failure diagnostics."""

    def __init__(self, message, n_failures=0, b=0, examples=None):
        super().__init__(message)
        self.n_failures = n_failures
        self.b = b
        self.examples = examples or []


class ConfigError(GibbsDesignError):
    """Run configuration failed validation; carries a JSON-pointer path."""

    def __init__(self, message, pointer=""):
        super().__init__(message)
        self.pointer = pointer
