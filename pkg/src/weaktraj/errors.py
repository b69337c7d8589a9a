"""Exception hierarchy.

The CLI maps these onto exit codes: configuration problems exit with 2,
numerical failures with 3 and impossible postselection with 4.
"""


class WeakTrajError(Exception):
    """Base class for all errors raised by this package."""

    exit_code = 3


class SpaceMismatchError(WeakTrajError, ValueError):
    """Operators defined on different Hilbert spaces were combined."""


class InvalidStateError(WeakTrajError, ValueError):
    """A matrix violates the State or Effect invariants."""


class NumericalError(WeakTrajError, ArithmeticError):
    """Generic numerical failure (eigensolver, fit, regime)."""


class IntegrationError(NumericalError):
    """Non-finite or invalid values appeared during time integration.

    ``step`` is the index of the step at which the failure was detected.
    """

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class StepSizeError(IntegrationError):
    """The time step is too coarse for the probabilistic update."""


class SteadyStateError(NumericalError):
    """The Liouvillian null space is degenerate or could not be resolved."""


class RegimeError(NumericalError):
    """Parameters lie outside the regime in which a formula is claimed."""


class FitError(NumericalError):
    """A least-squares fit did not converge."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


class PostselectionError(WeakTrajError):
    """The postselected event has (numerically) zero probability."""

    exit_code = 4

    def __init__(self, message, overlap=None):
        super().__init__(message)
        self.overlap = overlap


class NoPostselectionEvents(PostselectionError):
    """A Monte Carlo ensemble contained no postselected trajectories."""


class ConfigError(WeakTrajError, ValueError):
    """Malformed or invalid run configuration."""

    exit_code = 2
