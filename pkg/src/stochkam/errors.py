"""Exception hierarchy shared by all modules."""


class StochKAMError(Exception):
    """Base class for package errors."""


class ContractViolation(StochKAMError, ValueError):
    """An argument violates an operation's precondition."""


class NumericDomainError(StochKAMError, ArithmeticError):
    """A quantity that must be finite is not."""

    def __init__(self, message, point=None):
        super().__init__(message)
        self.point = point


class IntegrationFailure(StochKAMError, RuntimeError):
    """Implicit step did not converge."""

    def __init__(self, message, step):
        super().__init__(message)
        self.step = step


class ChartSingularityError(StochKAMError, ValueError):
    """Action-angle chart evaluated where an angle is undefined."""


class NearSingularError(StochKAMError, ArithmeticError):
    """Diffusion matrix too close to singular (ellipticity violated)."""

    def __init__(self, message, point=None, index=None):
        super().__init__(message)
        self.point = point
        self.index = index


class DomainExit(StochKAMError):
    """A simulated state left the declared domain box.

    ``step`` is the index of the first grid node outside the box and
    ``path`` holds the nodes computed up to and including that one.
    """

    def __init__(self, step, path=None):
        super().__init__(f"state left the domain box at step {step}")
        self.step = step
        self.path = path


class EmptyCurveError(StochKAMError, RuntimeError):
    """Every point of an LDP curve had too few tube hits."""


class InvalidParameters(StochKAMError, ValueError):
    """Parameter combination outside the admissible range."""


class SamplingTooCoarse(StochKAMError, ValueError):
    """Angle series sampled too coarsely to unwrap unambiguously."""
