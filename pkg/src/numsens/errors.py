"""Exception types shared across the package."""


class ContractViolationError(ValueError):
    """An operation was called with inputs violating its stated contract."""


class AdmissibilityError(ValueError):
    """A perturbation parameter lies outside its admissible range."""


class InvariantViolationError(RuntimeError):
    """An internal invariant failed; indicates a model or solver bug."""


class NoOptimizerError(RuntimeError):
    """The optimization problem has no optimizer (one-step arbitrage found)."""


class NumericalError(RuntimeError):
    """An iterative routine failed to converge within its budget."""


class RepresentationError(RuntimeError):
    """A martingale cannot be represented as a stochastic integral."""
