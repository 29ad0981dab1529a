"""Error taxonomy shared by all modules."""


class InvalidInputError(ValueError):
    """Arguments violate a documented precondition (shape, sign, domain)."""


class NumericalFailureError(RuntimeError):
    """A linear-algebra routine failed beyond the configured jitter budget."""


class EvaluationFailureError(RuntimeError):
    """An objective produced a non-finite value or gradient."""


class OptimizationFailureError(RuntimeError):
    """Every optimizer restart failed to produce a finite objective."""


class EnvironmentFailureError(RuntimeError):
    """Simulated dynamics produced a non-finite state."""
