"""Custom mmtopt exception types."""


class MmtoptException(Exception):
    """Exception thrown when an optimization or homogenization problem is invalid."""

    def __init__(self, message):
        """Initialize exception."""
        super().__init__(message)


class InvalidArgumentException(MmtoptException):
    """Exception thrown when an argument is outside of its admissible range."""

    def __init__(self, name, message="Invalid argument."):
        """Initialize exception."""
        super().__init__(f"{name} -> {message}")


class ConfigurationException(MmtoptException):
    """Exception thrown when the configuration is incorrect."""

    def __init__(self, key, message="Problem has been incorrectly configured."):
        """Initialize exception."""
        self.key = key
        super().__init__(f"{key} -> {message}")


class InfeasibleBudgetException(ConfigurationException):
    """Exception thrown when the mass budget cannot be met by any admissible design."""

    def __init__(self, budget, minimum, message=None):
        """Initialize exception."""
        self.budget = budget
        self.minimum = minimum
        if message is None:
            message = (
                f"Mass budget {budget:g} is infeasible: the budget must exceed "
                f"|Omega| * z_min * sum_i rho_i(m_upper_i) = {minimum:g}."
            )
        super().__init__("mass_budget", message)


class MeshException(MmtoptException):
    """Exception thrown when a mesh violates its invariants."""

    def __init__(self, name, message="Mesh is invalid."):
        """Initialize exception."""
        super().__init__(f"{name} -> {message}")


class SolverException(MmtoptException):
    """Exception thrown when a linear solve does not reach its tolerance."""

    def __init__(self, residual, message="Linear solve did not converge."):
        """Initialize exception."""
        self.residual = residual
        super().__init__(f"residual {residual:.3e} -> {message}")


class NumericalFailureException(MmtoptException):
    """Exception thrown when a multiplier bracket cannot be found."""

    def __init__(self, name, message="Bracket expansion exhausted."):
        """Initialize exception."""
        super().__init__(f"{name} -> {message}")


class OutOfRangeException(MmtoptException):
    """Exception thrown when a parameter lies outside every database interval."""

    def __init__(self, value, intervals, message=None):
        """Initialize exception."""
        self.value = value
        valid = ", ".join(f"[{lo:g}, {hi:g}]" for lo, hi in intervals)
        if message is None:
            message = f"Parameter outside of the valid intervals {valid}."
        super().__init__(f"m={value:g} -> {message}")


class CHOInstabilityException(MmtoptException):
    """Exception thrown when the phase-field integration blows up."""

    def __init__(self, time, message="Phase field diverged; retry with a smaller dt."):
        """Initialize exception."""
        super().__init__(f"t={time:g} -> {message}")


class PatternClassificationException(MmtoptException):
    """Exception thrown when a simulated pattern does not match the expected class."""

    def __init__(self, m, message="Pattern could not be classified."):
        """Initialize exception."""
        self.m = m
        super().__init__(f"m={m:g} -> {message}")


class DisorderException(PatternClassificationException):
    """Exception thrown when the monomer proportion lies in the disordered region."""

    def __init__(self, m, message="Monomer proportion lies in the disordered region."):
        """Initialize exception."""
        super().__init__(m, message)


class UnsupportedAngleException(MmtoptException):
    """Exception thrown when a cell cannot be rotated exactly by the requested angle."""

    def __init__(self, angle, message="Cell grid does not admit this rotation."):
        """Initialize exception."""
        super().__init__(f"angle={angle:g} -> {message}")
