"""Exception hierarchy shared by all modules."""


class EpiCtrlError(Exception):
    """Base class for every error raised by this package."""


class ParameterError(EpiCtrlError, ValueError):
    """A model, cost or solver parameter violates its admissible range."""


class InvariantError(EpiCtrlError, ArithmeticError):
    """A computed trajectory left the population simplex (usually dt too large)."""


class DomainError(EpiCtrlError, ValueError):
    """Argument outside the mathematical domain of a function."""


class DegenerateError(EpiCtrlError, ArithmeticError):
    """A quantity needed for a change of variables or a ratio vanished."""


class BoundViolationError(EpiCtrlError, ValueError):
    """A perturbed control would leave its admissible box."""


class ScenarioError(EpiCtrlError, ValueError):
    """Malformed or invalid scenario file."""


class NonFiniteError(EpiCtrlError, FloatingPointError):
    """NaN or infinity appeared in a state, costate or cost value."""
